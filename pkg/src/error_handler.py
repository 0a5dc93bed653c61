"""
Error handling module for SVD-Cache.

This module provides consistent error handling and logging across the package.
"""

import logging
import traceback
from typing import Any, Callable, Dict, Optional, TypeVar, cast

# Type variables for generic functions
R = TypeVar('R')

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class SvdCacheError(Exception):
    """Base exception class for SVD-Cache."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        """
        Initialize the exception.

        Args:
            message: Error message
            details: Additional error details
        """
        self.message = message
        self.details = details or {}
        super().__init__(message)


class ValidationError(SvdCacheError):
    """Exception raised for invalid arguments (shapes, ranges, non-finite data)."""
    pass


class ConfigError(SvdCacheError):
    """Exception raised for configuration errors."""
    pass


class LinalgError(SvdCacheError):
    """Exception raised when a linear-algebra kernel cannot produce a result."""
    pass


class BasisError(SvdCacheError):
    """Exception raised for missing or inconsistent spectral bases."""
    pass


class FormatError(SvdCacheError):
    """Base exception for binary file codec failures."""
    pass


class MalformedFileError(FormatError):
    """Exception raised when a file is structurally invalid."""
    pass


class VersionMismatchError(FormatError):
    """Exception raised when a file carries an unsupported format version."""
    pass


class ChecksumError(FormatError):
    """Exception raised when a file's CRC does not match its payload."""
    pass


class ForecastError(SvdCacheError):
    """Exception raised for forecaster misuse (uninitialized state, empty history)."""
    pass


class EngineError(SvdCacheError):
    """Exception raised by the cache engine during a run."""
    pass


class TrajectoryError(SvdCacheError):
    """Exception raised for trajectory generation and analysis errors."""
    pass


def setup_logger(name: str, log_file: Optional[str] = None, level: int = logging.INFO) -> logging.Logger:
    """
    Set up a logger with consistent formatting.

    Handlers are attached only once per logger name, so repeated calls from
    module imports do not duplicate output.

    Args:
        name: Logger name
        log_file: Optional log file path
        level: Logging level

    Returns:
        Configured logger
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)

    formatter = logging.Formatter(LOG_FORMAT)

    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in logger.handlers):
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def configure_package_logging(level: str = "INFO", log_file: Optional[str] = None) -> int:
    """
    Set the level (and optional log file) of every ``svdcache.*`` logger.

    Args:
        level: Level name such as ``"DEBUG"`` or ``"INFO"``
        log_file: Optional log file shared by all package loggers

    Returns:
        Number of loggers configured

    Raises:
        ConfigError: If the level name is unknown
    """
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"Unknown log level: {level}", {'level': level})

    file_handler = None
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))

    count = 0
    for name, obj in list(logging.Logger.manager.loggerDict.items()):
        if name.startswith('svdcache.') and isinstance(obj, logging.Logger):
            obj.setLevel(numeric)
            if file_handler is not None:
                obj.addHandler(file_handler)
            count += 1
    return count


def safe_execute(func: Callable[..., R],
                 error_message: str,
                 logger: logging.Logger,
                 default_return: Optional[R] = None,
                 error_class: type = SvdCacheError,
                 log_level: int = logging.ERROR,
                 raise_error: bool = False,
                 **kwargs: Any) -> R:
    """
    Execute a function safely with proper error handling.

    Args:
        func: Function to execute
        error_message: Message to log on error
        logger: Logger to use
        default_return: Default value to return on error
        error_class: Exception class to raise
        log_level: Logging level for errors
        raise_error: Whether to raise the error or just log it
        **kwargs: Arguments to pass to the function

    Returns:
        Function result or default return value on error

    Raises:
        Exception of error_class type if raise_error is True
    """
    try:
        return func(**kwargs)
    except Exception as e:
        error_details = {
            'exception_type': type(e).__name__,
            'exception_message': str(e),
            'traceback': traceback.format_exc()
        }
        if isinstance(e, SvdCacheError):
            error_details.update(e.details)

        logger.log(log_level, f"{error_message}: {e}", extra={'error_details': error_details})

        if raise_error:
            raise error_class(f"{error_message}: {e}", error_details) from e

        return cast(R, default_return)


def validate_input(value: Any,
                   validators: Dict[str, Callable[[Any], bool]],
                   error_message: str = "Input validation failed") -> None:
    """
    Validate an input value against a set of validators.

    Args:
        value: Value to validate
        validators: Dictionary of validator name to validator function
        error_message: Base error message

    Raises:
        ValidationError: If validation fails
    """
    errors = []

    for name, validator in validators.items():
        try:
            ok = validator(value)
        except Exception:
            ok = False
        if not ok:
            errors.append(name)

    if errors:
        raise ValidationError(
            f"{error_message}: {', '.join(errors)}",
            {'value': str(value), 'failed_validations': errors}
        )
