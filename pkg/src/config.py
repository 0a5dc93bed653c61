"""
Configuration module for SVD-Cache experiments.
"""

import copy
import json
import os
from typing import Any, Dict, List, Optional

from src.cache_engine import StrategyConfig
from src.error_handler import ConfigError, ValidationError, setup_logger
from src.trajectory_lab import DenoiserConfig, SynthConfig

logger = setup_logger('svdcache.config')

SOURCE_KINDS = ('synth', 'toy_denoiser', 'file')
OUTPUT_ENV_VAR = 'SVDCACHE_OUT'
DEFAULT_OUTPUT_DIR = './svdcache_out'

DEFAULT_CONFIG: Dict[str, Any] = {
    'source': {'kind': 'synth', 'path': None},
    'synth': {
        'N': 64, 'D': 64, 'blocks': 4, 'planted_rank': 6, 'energy_split': 0.9,
        'drift_rate': 0.05, 'oscillation_freq': 0.45, 'basis_seed': 0,
        'spectrum_decay': 0.922, 'jitter': 0.3, 'drift_amplitude': 0.035, 'residual_trend': 4.0,
    },
    'denoiser': {
        'N': 64, 'D': 64, 'L': 4, 'alpha_bar_start': 0.9999, 'alpha_bar_end': 0.01,
        'eta': 1.0, 'sampler': 'ddpm', 'block_gain': 0.5,
        'content_rank': 4, 'gate_jitter': 0.3, 'input_gain': 0.2,
    },
    'schedule': {'T': 50, 'N': 5},
    'strategy': {'principal_rule': 'ema', 'residual_rule': 'reuse', 'tau': 0.85, 'beta': 0.9, 'decompose': True},
    'strategies': ['ema+reuse', 'reuse+reuse', 'ema+ema', 'reuse+ema',
                   'full:reuse', 'full:ema', 'full:taylor(1)', 'taylor(2)+reuse'],
    'tau_list': [0.5, 0.7, 0.85, 0.95, 0.99],
    'interval_list': [],
    'basis': {'mode': 'per-step', 'dir': None, 'reference_seed': None},
    'seeds': [0],
    'output_dir': None,
    'jobs': 1,
}


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(expression: str):
    """
    Split ``key.sub=value`` into a dotted path and a value.

    The value is parsed as JSON and falls back to the plain string.

    Raises:
        ConfigError: If the expression has no ``=`` or an empty key
    """
    if '=' not in expression:
        raise ConfigError(f"Override must look like key.sub=value, got {expression!r}", {'override': expression})
    key, raw = expression.split('=', 1)
    key = key.strip()
    if not key or any(not part for part in key.split('.')):
        raise ConfigError(f"Override has an empty key: {expression!r}", {'override': expression})
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split('.'), value


class Config:
    """Experiment configuration: trajectory source, schedule, strategies, bases, seeds and outputs."""

    def __init__(self, config_data: Dict[str, Any]):
        """
        Initialize configuration, filling missing keys from DEFAULT_CONFIG.

        Args:
            config_data: Dictionary with configuration data

        Raises:
            ConfigError: If configuration is invalid
        """
        if not isinstance(config_data, dict):
            raise ConfigError("Configuration must be a JSON object")
        try:
            merged = _deep_merge(DEFAULT_CONFIG, config_data)
            self._validate_config(merged)
            self.config_data = merged
            logger.debug("Configuration initialized successfully")
        except ValidationError as e:
            logger.error(f"Configuration validation failed: {e.message}")
            raise ConfigError(f"Invalid configuration: {e.message}", e.details)

    @classmethod
    def from_file(cls, file_path: str) -> 'Config':
        """
        Load configuration from a JSON file.

        Raises:
            FileNotFoundError: If configuration file not found
            ConfigError: If configuration file is invalid
        """
        if not os.path.exists(file_path):
            logger.error(f"Configuration file not found: {file_path}")
            raise FileNotFoundError(f"Configuration file not found: {file_path}")
        try:
            with open(file_path, 'r') as f:
                config_data = json.load(f)
        except json.JSONDecodeError as e:
            logger.error(f"Invalid JSON in configuration file {file_path}: {str(e)}")
            raise ConfigError(f"Invalid JSON in configuration file: {str(e)}", {'path': file_path})
        logger.info(f"Configuration loaded from {file_path}")
        return cls(config_data)

    def _validate_config(self, data: Dict[str, Any]) -> None:
        """
        Raises:
            ValidationError: If configuration is invalid
        """
        unknown = sorted(set(data) - set(DEFAULT_CONFIG))
        if unknown:
            raise ValidationError(f"Unknown configuration keys: {', '.join(unknown)}", {'keys': unknown})
        for section in ('source', 'synth', 'denoiser', 'schedule', 'strategy', 'basis'):
            if not isinstance(data[section], dict):
                raise ValidationError(f"Section {section} must be an object", {'section': section})
            extra = sorted(set(data[section]) - set(DEFAULT_CONFIG[section]))
            if extra:
                raise ValidationError(f"Unknown keys in {section}: {', '.join(extra)}",
                                      {'section': section, 'keys': extra})

        source = data['source']
        if source['kind'] not in SOURCE_KINDS:
            raise ValidationError(f"source.kind must be one of {SOURCE_KINDS}, got {source['kind']}",
                                  {'kind': source['kind']})
        if source['kind'] == 'file':
            if not source.get('path') or not os.path.exists(source['path']):
                raise ValidationError(f"Trajectory file not found: {source.get('path')}", {'path': source.get('path')})

        schedule = data['schedule']
        for key in ('T', 'N'):
            if not isinstance(schedule[key], int) or isinstance(schedule[key], bool) or schedule[key] < 1:
                raise ValidationError(f"schedule.{key} must be a positive integer", {key: schedule[key]})
        if schedule['N'] > schedule['T']:
            raise ValidationError("schedule.N must not exceed schedule.T", dict(schedule))

        seeds = data['seeds']
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ValidationError("seeds must be a nonempty list of integers", {'seeds': seeds})
        for key in ('strategies', 'tau_list', 'interval_list'):
            if not isinstance(data[key], list):
                raise ValidationError(f"{key} must be a list", {key: data[key]})
        if not data['strategies'] or not data['tau_list']:
            raise ValidationError("strategies and tau_list must be nonempty")
        for N in data['interval_list']:
            if not isinstance(N, int) or not 1 <= N <= schedule['T']:
                raise ValidationError(f"interval_list entries must be in [1, T], got {N}", {'N': N})
        if not isinstance(data['jobs'], int) or data['jobs'] < 1:
            raise ValidationError("jobs must be a positive integer", {'jobs': data['jobs']})
        if data['basis']['mode'] not in ('per-step', 'global'):
            raise ValidationError(f"basis.mode must be per-step or global, got {data['basis']['mode']}")

        # Constructing the typed objects checks their value ranges.
        self._typed(data)

    @staticmethod
    def _typed(data: Dict[str, Any]) -> None:
        try:
            SynthConfig(T=data['schedule']['T'], seed=data['seeds'][0], **data['synth']).validate()
            DenoiserConfig(T=data['schedule']['T'], seed=data['seeds'][0], **data['denoiser']).validate()
            StrategyConfig(basis_mode=data['basis']['mode'], **data['strategy'])
            for label in data['strategies']:
                StrategyConfig.from_label(label)
            for tau in data['tau_list']:
                StrategyConfig(tau=tau)
        except TypeError as e:
            raise ValidationError(f"Malformed configuration section: {e}")
        except ValidationError:
            raise
        except Exception as e:
            details = getattr(e, 'details', {})
            raise ValidationError(str(getattr(e, 'message', e)), details)

    def apply_overrides(self, overrides: Optional[List[str]]) -> 'Config':
        """
        Return a new Config with ``key.sub=value`` overrides applied.

        Raises:
            ConfigError: Malformed expression or a key that is not part of the schema
        """
        data = copy.deepcopy(self.config_data)
        for expression in overrides or []:
            path, value = parse_override(expression)
            node, schema = data, DEFAULT_CONFIG
            for part in path[:-1]:
                if not isinstance(schema.get(part), dict):
                    raise ConfigError(f"Unknown configuration section in override: {'.'.join(path)}",
                                      {'override': expression})
                node, schema = node[part], schema[part]
            if path[-1] not in schema:
                raise ConfigError(f"Unknown configuration key in override: {'.'.join(path)}",
                                  {'override': expression})
            node[path[-1]] = value
        return Config(data)

    def with_seeds(self, seeds: Optional[List[int]]) -> 'Config':
        if not seeds:
            return self
        data = copy.deepcopy(self.config_data)
        data['seeds'] = [int(s) for s in seeds]
        return Config(data)

    def to_canonical(self) -> str:
        return json.dumps(self.config_data, sort_keys=True, indent=2)

    def get(self, key: str, default: Optional[Any] = None) -> Any:
        return self.config_data.get(key, default)

    def get_source(self) -> Dict[str, Any]:
        return dict(self.config_data['source'])

    def get_synth_config(self, seed: int):
        """SynthConfig for one seed; T comes from the schedule section."""
        return SynthConfig(T=self.config_data['schedule']['T'], seed=int(seed), **self.config_data['synth'])

    def get_denoiser_config(self, seed: int):
        return DenoiserConfig(T=self.config_data['schedule']['T'], seed=int(seed), **self.config_data['denoiser'])

    def get_schedule_params(self) -> Dict[str, int]:
        return dict(self.config_data['schedule'])

    def get_basis_mode(self) -> str:
        return self.config_data['basis']['mode']

    def get_basis_dir(self) -> Optional[str]:
        return self.config_data['basis']['dir']

    def get_reference_seed(self) -> Optional[int]:
        return self.config_data['basis']['reference_seed']

    def get_strategy(self):
        """The single strategy used by ``run``."""
        return StrategyConfig(basis_mode=self.get_basis_mode(), **self.config_data['strategy'])

    def get_strategy_list(self):
        """Strategies for ``compare``, sharing tau/beta/basis mode with the main strategy."""
        base = self.config_data['strategy']
        return [StrategyConfig.from_label(label, tau=base['tau'], beta=base['beta'], basis_mode=self.get_basis_mode())
                for label in self.config_data['strategies']]

    def get_tau_list(self) -> List[float]:
        return [float(t) for t in self.config_data['tau_list']]

    def get_interval_list(self) -> List[int]:
        return [int(n) for n in self.config_data['interval_list']]

    def get_seeds(self) -> List[int]:
        return list(self.config_data['seeds'])

    def get_jobs(self) -> int:
        return int(self.config_data['jobs'])

    def get_output_dir(self, cli_out: Optional[str] = None) -> str:
        """
        Output directory: ``--out`` flag, then ``output_dir``, then $SVDCACHE_OUT, then ./svdcache_out.
        """
        if cli_out:
            return cli_out
        if self.config_data.get('output_dir'):
            return self.config_data['output_dir']
        return os.environ.get(OUTPUT_ENV_VAR) or DEFAULT_OUTPUT_DIR
