"""
Temporal predictors for cached feature components.

Three families are provided: the exponential moving average used for the
principal subspace, direct reuse, and polynomial (Lagrange) extrapolation
over a short history window as a baseline. Each is also wrapped in a small
predictor class so the cache engine can treat them uniformly.
"""

import re
from collections import deque
from dataclasses import dataclass
from typing import Deque, List, Optional, Tuple

import numpy as np

from src.error_handler import ForecastError, ValidationError, setup_logger

logger = setup_logger('svdcache.forecaster')

DEFAULT_BETA = 0.9
PREDICTION_RULES = ('state', 'extrapolate')
RULE_NAMES = ('ema', 'ema_extrapolate', 'reuse', 'taylor', 'recompute')
_RULE_PATTERN = re.compile(r'^\s*(ema_extrapolate|ema|reuse|recompute|taylor)\s*(?:\(\s*(\d+)\s*\))?\s*$')


def _check_beta(beta: float) -> float:
    if not isinstance(beta, (int, float)) or not 0.0 < float(beta) < 1.0:
        raise ValidationError(f"EMA decay beta must be in (0, 1), got {beta}", {'beta': beta})
    return float(beta)


@dataclass(frozen=True, eq=False)
class EmaState:
    """Recursive EMA accumulator; ``state`` is None until the first update."""

    beta: float = DEFAULT_BETA
    state: Optional[np.ndarray] = None
    last_step: Optional[int] = None
    last_input: Optional[np.ndarray] = None

    def __post_init__(self):
        _check_beta(self.beta)

    @property
    def initialized(self) -> bool:
        return self.state is not None


def ema_update(s: EmaState, F_k, step: int) -> EmaState:
    """
    Fold one observation into the EMA.

    The first update copies the observation; later ones apply
    ``state = beta * state + (1 - beta) * F_k`` once per call regardless of
    the step gap.

    Raises:
        ValidationError: Shape mismatch, non-finite input or a step that does not increase
    """
    F = np.asarray(F_k, dtype=np.float64)
    if not np.all(np.isfinite(F)):
        raise ValidationError("EMA input contains non-finite values", {'step': step})
    if not s.initialized:
        return EmaState(beta=s.beta, state=F.copy(), last_step=int(step), last_input=F.copy())

    if F.shape != s.state.shape:
        raise ValidationError(f"EMA input shape {F.shape} does not match state {s.state.shape}",
                              {'input_shape': F.shape, 'state_shape': s.state.shape})
    if step <= s.last_step:
        raise ValidationError(f"EMA steps must increase: got {step} after {s.last_step}",
                              {'step': step, 'last_step': s.last_step})
    new_state = s.beta * s.state + (1.0 - s.beta) * F
    return EmaState(beta=s.beta, state=new_state, last_step=int(step), last_input=F.copy())


def ema_predict(s: EmaState, rule: str = 'state') -> np.ndarray:
    """
    Prediction from an EMA state.

    ``rule='state'`` returns the smoothed state itself. ``rule='extrapolate'``
    returns ``2 * F_last - state``, which removes the steady-state lag of the
    average under a linear trend.

    Raises:
        ForecastError: If the state was never updated
        ValidationError: Unknown rule
    """
    if rule not in PREDICTION_RULES:
        raise ValidationError(f"Unknown EMA prediction rule: {rule}", {'rule': rule, 'allowed': PREDICTION_RULES})
    if not s.initialized:
        raise ForecastError("EMA state has not been initialized")
    if rule == 'state':
        return s.state
    return 2.0 * s.last_input - s.state


def reuse_predict(cached):
    return cached


class History:
    """Sliding window of (step, feature) samples with strictly increasing steps."""

    def __init__(self, capacity: int):
        if not isinstance(capacity, int) or capacity < 1:
            raise ValidationError(f"History capacity must be a positive integer, got {capacity}")
        self.capacity = capacity
        self._items: Deque[Tuple[int, np.ndarray]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, step: int, F) -> None:
        """
        Raises:
            ValidationError: Non-increasing step or shape mismatch
        """
        F = np.asarray(F, dtype=np.float64)
        if self._items:
            last_step, last = self._items[-1]
            if step <= last_step:
                raise ValidationError(f"History steps must increase: got {step} after {last_step}",
                                      {'step': step, 'last_step': last_step})
            if F.shape != last.shape:
                raise ValidationError(f"History sample shape {F.shape} differs from {last.shape}")
        self._items.append((int(step), F.copy()))

    @property
    def steps(self) -> List[int]:
        return [t for t, _ in self._items]

    @property
    def samples(self) -> List[np.ndarray]:
        return [F for _, F in self._items]

    @property
    def last_step(self) -> Optional[int]:
        return self._items[-1][0] if self._items else None


def lagrange_weights(steps: List[int], target: float) -> np.ndarray:
    """Weights w_i with ``p(target) = sum_i w_i p(steps[i])`` for the interpolating polynomial."""
    t = np.asarray(steps, dtype=np.float64)
    weights = np.ones_like(t)
    for i in range(t.size):
        others = np.delete(t, i)
        weights[i] = np.prod((target - others) / (t[i] - others))
    return weights


def taylor_predict(h: History, target_step: int) -> np.ndarray:
    """
    Evaluate the polynomial through all history samples at ``target_step``.

    With one sample this is reuse; with two it is linear extrapolation.

    Raises:
        ForecastError: Empty history
        ValidationError: Target not after the last sample
    """
    if len(h) == 0:
        raise ForecastError("Cannot extrapolate from an empty history")
    if target_step <= h.last_step:
        raise ValidationError(f"Target step {target_step} must follow the last sample {h.last_step}",
                              {'target_step': target_step, 'last_step': h.last_step})
    if len(h) == 1:
        return h.samples[0]
    weights = lagrange_weights(h.steps, float(target_step))
    return np.tensordot(weights, np.stack(h.samples), axes=1)


def parse_rule(text: str) -> Tuple[str, int]:
    """
    Parse ``ema``, ``ema_extrapolate``, ``reuse``, ``recompute`` or ``taylor(order)``.

    Returns:
        (name, order); order is 0 except for taylor (default 1)

    Raises:
        ValidationError: Unrecognized rule text
    """
    match = _RULE_PATTERN.match(str(text))
    if not match:
        raise ValidationError(f"Unknown prediction rule: {text!r}", {'rule': text, 'allowed': RULE_NAMES})
    name, order = match.group(1), match.group(2)
    if order is not None and name != 'taylor':
        raise ValidationError(f"Rule {name!r} does not take an order", {'rule': text})
    return name, (int(order) if order is not None else (1 if name == 'taylor' else 0))


def format_rule(name: str, order: int = 0) -> str:
    return f"taylor({order})" if name == 'taylor' else name


class Predictor:
    """A per-component forecaster driven by compute-step observations."""

    name = 'base'
    uses_truth = False

    def observe(self, step: int, F: np.ndarray) -> None:
        raise NotImplementedError

    def predict(self, step: int) -> np.ndarray:
        raise NotImplementedError


class EmaPredictor(Predictor):
    name = 'ema'

    def __init__(self, beta: float = DEFAULT_BETA, rule: str = 'state'):
        self.state = EmaState(beta=beta)
        self.rule = rule

    def observe(self, step, F):
        self.state = ema_update(self.state, F, step)

    def predict(self, step):
        return ema_predict(self.state, self.rule)


class ReusePredictor(Predictor):
    name = 'reuse'

    def __init__(self):
        self.cached: Optional[np.ndarray] = None

    def observe(self, step, F):
        self.cached = F

    def predict(self, step):
        if self.cached is None:
            raise ForecastError("Nothing cached to reuse yet")
        return reuse_predict(self.cached)


class TaylorPredictor(Predictor):
    name = 'taylor'

    def __init__(self, order: int = 1):
        if order < 0:
            raise ValidationError(f"Taylor order must be nonnegative, got {order}")
        self.order = order
        self.history = History(order + 1)

    def observe(self, step, F):
        self.history.push(step, F)

    def predict(self, step):
        return taylor_predict(self.history, step)


class RecomputePredictor(Predictor):
    """Upper bound: the engine substitutes the true component."""

    name = 'recompute'
    uses_truth = True

    def observe(self, step, F):
        pass

    def predict(self, step):
        raise ForecastError("recompute has no prediction; the engine supplies the true component")


def make_predictor(rule: str, beta: float = DEFAULT_BETA) -> Predictor:
    """Build a fresh predictor for a rule string such as ``'ema'`` or ``'taylor(2)'``."""
    name, order = parse_rule(rule)
    logger.debug(f"Building predictor {format_rule(name, order)} (beta={beta})")
    if name == 'ema':
        return EmaPredictor(beta, 'state')
    if name == 'ema_extrapolate':
        return EmaPredictor(beta, 'extrapolate')
    if name == 'reuse':
        return ReusePredictor()
    if name == 'taylor':
        return TaylorPredictor(order)
    return RecomputePredictor()
