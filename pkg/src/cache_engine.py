"""
Cache engine module for interval-scheduled subspace feature caching.

At every compute step the true block feature is read, split against the
block's basis into principal and residual parts, and each part's predictor
observes it. At skipped steps the two predictions are summed and compared
against the truth. Skipped steps never re-split and never update predictor
state. Blocks are independent: each owns its basis, predictors and cached
residual.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.basis_store import BasisStore, SpectralBasis, build_reference_basis, split
from src.error_handler import BasisError, EngineError, LinalgError, ValidationError, setup_logger, validate_input
from src.file_formats import GLOBAL_STEP_ID, atomic_write_bytes
from src.forecaster import DEFAULT_BETA, Predictor, format_rule, make_predictor, parse_rule
from src.linalg import frobenius_norm, project_onto_basis, relative_error, select_rank
from src.metrics import run_summary, similarity
from src.trajectory_lab import ToyDenoiser, TrajectoryRecord

logger = setup_logger('svdcache.cache_engine')

BASIS_MODES = ('per-step', 'global')
REPORT_COLUMNS = ['block', 'step', 'is_compute', 'rel_error', 'similarity', 'principal_energy_fraction']


@dataclass(frozen=True)
class CacheSchedule:
    """Fixed-interval schedule: compute at 0, N, 2N, ... below T."""

    total_steps: int
    interval: int
    compute_steps: Tuple[int, ...]

    def is_compute(self, step: int) -> bool:
        return step % self.interval == 0

    def predecessor(self, step: int) -> int:
        """Most recent compute step at or before ``step``."""
        return step - step % self.interval

    @property
    def compute_count(self) -> int:
        return len(self.compute_steps)

    @property
    def predicted_count(self) -> int:
        return self.total_steps - self.compute_count

    @property
    def speedup(self) -> float:
        return self.total_steps / self.compute_count

    @property
    def compute_fraction(self) -> float:
        return self.compute_count / self.total_steps

    def to_dict(self) -> Dict[str, Any]:
        return {'total_steps': self.total_steps, 'interval': self.interval,
                'compute_count': self.compute_count, 'speedup': self.speedup}


def _is_int(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


def make_schedule(T: int, N: int) -> CacheSchedule:
    """
    Build the interval schedule.

    Args:
        T: Total number of steps (>= 1)
        N: Interval between full computations (1 <= N <= T)

    Returns:
        CacheSchedule with ceil(T/N) compute steps

    Raises:
        ValidationError: If T < 1 or N is outside [1, T]
    """
    validate_input(T, {'integer': _is_int, 'at least 1': lambda v: v >= 1}, "Invalid total steps T")
    validate_input(N, {'integer': _is_int, 'at least 1': lambda v: v >= 1, f'at most T={T}': lambda v: v <= T},
                   "Invalid interval N")
    steps = tuple(range(0, int(T), int(N)))
    return CacheSchedule(total_steps=int(T), interval=int(N), compute_steps=steps)


def flops_estimate(T: int, N: int, full_flops: float = 1.0, uncached_fraction: float = 0.0) -> Dict[str, float]:
    """
    FLOPs accounting when a fraction of the network is never cached.

    Args:
        T: Total steps
        N: Interval
        full_flops: FLOPs of one uncached forward pass
        uncached_fraction: Share of ``full_flops`` that runs at every step

    Returns:
        Dictionary with block-level and end-to-end speedups and total FLOPs
    """
    if not 0.0 <= uncached_fraction <= 1.0:
        raise ValidationError(f"uncached_fraction must be in [0, 1], got {uncached_fraction}")
    schedule = make_schedule(T, N)
    cached_part = full_flops * (1.0 - uncached_fraction) * schedule.compute_count
    always_part = full_flops * uncached_fraction * T
    total = cached_part + always_part
    return {
        'block_speedup': schedule.speedup,
        'end_to_end_speedup': (full_flops * T) / total,
        'total_flops': total,
        'uncached_flops': full_flops * T,
    }


@dataclass(frozen=True)
class StrategyConfig:
    """
    How each component is forecast at skipped steps.

    With ``decompose=False`` the principal rule runs on the whole feature and
    the residual rule is ignored.
    """

    principal_rule: str = 'ema'
    residual_rule: str = 'reuse'
    tau: float = 0.85
    beta: float = DEFAULT_BETA
    basis_mode: str = 'per-step'
    decompose: bool = True

    def __post_init__(self):
        parse_rule(self.principal_rule)
        parse_rule(self.residual_rule)
        if not isinstance(self.tau, (int, float)) or not 0.0 < float(self.tau) <= 1.0:
            raise ValidationError(f"tau must be in (0, 1], got {self.tau}", {'tau': self.tau})
        if not isinstance(self.beta, (int, float)) or not 0.0 < float(self.beta) < 1.0:
            raise ValidationError(f"beta must be in (0, 1), got {self.beta}", {'beta': self.beta})
        if self.basis_mode not in BASIS_MODES:
            raise ValidationError(f"Unknown basis mode {self.basis_mode}",
                                  {'basis_mode': self.basis_mode, 'allowed': BASIS_MODES})

    @property
    def label(self) -> str:
        principal = format_rule(*parse_rule(self.principal_rule))
        if not self.decompose:
            return f"full:{principal}"
        return f"{principal}+{format_rule(*parse_rule(self.residual_rule))}"

    @classmethod
    def from_label(cls, label: str, **kwargs) -> 'StrategyConfig':
        """Parse ``'ema+reuse'`` (split) or ``'full:taylor(2)'`` (whole feature)."""
        text = str(label).strip()
        if text.startswith('full:'):
            rule = text[len('full:'):]
            return cls(principal_rule=rule, residual_rule=rule, decompose=False, **kwargs)
        if '+' not in text:
            raise ValidationError(f"Strategy label must be 'principal+residual' or 'full:rule', got {label!r}",
                                  {'label': label})
        principal, residual = text.split('+', 1)
        return cls(principal_rule=principal.strip(), residual_rule=residual.strip(), decompose=True, **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {'principal_rule': self.principal_rule, 'residual_rule': self.residual_rule,
                'tau': self.tau, 'beta': self.beta, 'basis_mode': self.basis_mode,
                'decompose': self.decompose, 'label': self.label}


@dataclass(frozen=True)
class StepRecord:
    block: int
    step: int
    is_compute: bool
    rel_error: float
    similarity: float
    principal_energy_fraction: float


@dataclass
class RunReport:
    """Per-step error accounting for one cached run over all blocks."""

    strategy: StrategyConfig
    schedule: CacheSchedule
    blocks: int
    rows: List[StepRecord] = field(default_factory=list)
    true_reads: Dict[int, int] = field(default_factory=dict)
    source_id: str = 'unknown'
    final_latent_rel_error: Optional[float] = None

    @property
    def total_steps(self) -> int:
        return self.schedule.total_steps

    @property
    def compute_count(self) -> int:
        return self.schedule.compute_count

    @property
    def predicted_count(self) -> int:
        return self.schedule.predicted_count

    @property
    def errors(self) -> List[float]:
        """Relative errors of predicted steps, in (block, step) order."""
        return [row.rel_error for row in self.rows if not row.is_compute]

    def summary(self) -> Dict[str, Any]:
        return run_summary(self)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([[getattr(row, c) for c in REPORT_COLUMNS] for row in self.rows],
                            columns=REPORT_COLUMNS)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'source_id': self.source_id,
            'strategy': self.strategy.to_dict(),
            'schedule': self.schedule.to_dict(),
            'blocks': self.blocks,
            'true_reads': {str(b): n for b, n in sorted(self.true_reads.items())},
            'summary': self.summary(),
        }

    def to_json(self, path: str) -> None:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        atomic_write_bytes(path, (text + '\n').encode('utf-8'))

    def to_csv(self, path: str) -> None:
        text = self.to_frame().to_csv(index=False, float_format='%.12g', lineterminator='\n')
        atomic_write_bytes(path, text.encode('utf-8'))


class BasisProvider:
    """
    Resolves the basis for (block, compute step).

    Backed either by a BasisStore or by a reference trajectory from which
    bases are built on first use. Global mode uses one basis per block,
    built from the reference's step 0.
    """

    def __init__(self, source: Union[BasisStore, TrajectoryRecord], tau: float, mode: str = 'per-step'):
        if mode not in BASIS_MODES:
            raise ValidationError(f"Unknown basis mode {mode}", {'basis_mode': mode})
        self.source = source
        self.tau = tau
        self.mode = mode
        self._built: Dict[Tuple[int, int], SpectralBasis] = {}

    def basis_for(self, block: int, step: int) -> SpectralBasis:
        """
        Raises:
            EngineError: If no basis can be resolved
        """
        key_step = GLOBAL_STEP_ID if self.mode == 'global' else step
        try:
            if isinstance(self.source, BasisStore):
                if self.mode == 'global':
                    return self.source.get(block, GLOBAL_STEP_ID)
                return self.source.lookup(block, step)
            if (block, key_step) not in self._built:
                ref_step = 0 if self.mode == 'global' else step
                if block >= self.source.L or ref_step >= self.source.T:
                    raise BasisError(f"Reference trajectory has no feature for block {block}, step {ref_step}",
                                     {'block': block, 'step': ref_step})
                self._built[(block, key_step)] = build_reference_basis(
                    self.source.feature(block, ref_step), self.tau, block, key_step, self.source.source_id)
            return self._built[(block, key_step)]
        except (BasisError, LinalgError) as e:
            logger.error(f"Missing basis for block {block} step {step}: {e.message}")
            raise EngineError(f"Missing basis for block {block} at step {step}: {e.message}",
                              {'block': block, 'step': step, 'basis_mode': self.mode}) from e


def _as_provider(basis_source, fallback: TrajectoryRecord, strategy: StrategyConfig) -> BasisProvider:
    if isinstance(basis_source, BasisProvider):
        return basis_source
    source = fallback if basis_source is None else basis_source
    return BasisProvider(source, strategy.tau, strategy.basis_mode)


def _step_error(predicted: np.ndarray, truth: np.ndarray) -> float:
    # A zero truth has no relative scale; fall back to the absolute error.
    if frobenius_norm(truth) == 0.0:
        return frobenius_norm(predicted)
    return relative_error(predicted, truth)


class BlockCache:
    """State machine for one block: basis, predictors and the last split."""

    def __init__(self, block: int, strategy: StrategyConfig, provider: BasisProvider):
        self.block = block
        self.strategy = strategy
        self.provider = provider
        self.principal: Predictor = make_predictor(strategy.principal_rule, strategy.beta)
        self.residual: Optional[Predictor] = (
            make_predictor(strategy.residual_rule, strategy.beta) if strategy.decompose else None)
        self.basis: Optional[SpectralBasis] = None
        self.k: Optional[int] = None
        self.shape: Optional[Tuple[int, ...]] = None
        self.reads = 0

    def _check_shape(self, F: np.ndarray, step: int) -> None:
        if self.shape is None:
            self.shape = F.shape
        elif F.shape != self.shape:
            raise EngineError(f"Block {self.block} feature shape changed from {self.shape} to {F.shape} at step {step}",
                              {'block': self.block, 'step': step})

    def observe(self, step: int, F: np.ndarray) -> float:
        """Consume a true feature at a compute step; returns its principal energy fraction."""
        self._check_shape(F, step)
        self.reads += 1
        if not self.strategy.decompose:
            self.principal.observe(step, F)
            return 1.0
        self.basis = self.provider.basis_for(self.block, step)
        self.k = select_rank(self.basis.sigma, self.strategy.tau)
        parts = split(F, self.basis, self.k)
        self.principal.observe(step, parts.principal)
        self.residual.observe(step, parts.residual)
        return parts.principal_energy_fraction

    @property
    def needs_truth(self) -> bool:
        if not self.strategy.decompose:
            return self.principal.uses_truth
        return self.principal.uses_truth or self.residual.uses_truth

    def predict(self, step: int, truth: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
        """
        Predicted feature at a skipped step and its principal energy fraction.

        ``truth`` is only consulted by ``recompute`` rules.
        """
        if self.needs_truth and truth is None:
            raise EngineError("A recompute rule needs the true feature", {'block': self.block, 'step': step})
        if not self.strategy.decompose:
            return (truth if self.principal.uses_truth else self.principal.predict(step)), 1.0
        if self.principal.uses_truth and self.residual.uses_truth:
            return truth, _fraction(project_onto_basis(truth, self.basis.V[:, :self.k]), truth)

        true_principal = None
        if self.needs_truth:
            true_principal = project_onto_basis(truth, self.basis.V[:, :self.k])
        p_hat = true_principal if self.principal.uses_truth else self.principal.predict(step)
        r_hat = truth - true_principal if self.residual.uses_truth else self.residual.predict(step)
        F_hat = p_hat + r_hat
        return F_hat, _fraction(p_hat, F_hat)


def _fraction(part: np.ndarray, whole: np.ndarray) -> float:
    total = frobenius_norm(whole) ** 2
    return frobenius_norm(part) ** 2 / total if total > 0.0 else 0.0


def _check_schedule(schedule: CacheSchedule, T: int) -> None:
    if schedule.total_steps != T:
        raise ValidationError(f"Schedule covers {schedule.total_steps} steps but the trajectory has {T}",
                              {'schedule_T': schedule.total_steps, 'trajectory_T': T})


def run_cached(trajectory: TrajectoryRecord, schedule: CacheSchedule, strategy: StrategyConfig,
               basis_source: Union[None, BasisStore, TrajectoryRecord, BasisProvider] = None) -> RunReport:
    """
    Open-loop cached run against recorded true features.

    Args:
        trajectory: Ground-truth features for every block and step
        schedule: Compute/skip schedule with ``total_steps == trajectory.T``
        strategy: Component rules and thresholds
        basis_source: BasisStore, reference trajectory or provider; defaults to
            building bases from ``trajectory`` itself

    Returns:
        RunReport with one row per (block, step)

    Raises:
        ValidationError: Schedule/trajectory length mismatch
        EngineError: Missing basis or shape drift across steps
    """
    _check_schedule(schedule, trajectory.T)
    provider = _as_provider(basis_source, trajectory, strategy)
    report = RunReport(strategy=strategy, schedule=schedule, blocks=trajectory.L, source_id=trajectory.source_id)

    for block in range(trajectory.L):
        cache = BlockCache(block, strategy, provider)
        for step in range(schedule.total_steps):
            if schedule.is_compute(step):
                fraction = cache.observe(step, trajectory.blocks[block][step])
                report.rows.append(StepRecord(block, step, True, 0.0, 1.0, fraction))
                continue
            truth = trajectory.blocks[block][step]
            F_hat, fraction = cache.predict(step, truth if cache.needs_truth else None)
            report.rows.append(StepRecord(block, step, False, _step_error(F_hat, truth),
                                          similarity(F_hat, truth).product, fraction))
        report.true_reads[block] = cache.reads

    logger.debug(f"run_cached {strategy.label} N={schedule.interval} on {trajectory.source_id}: "
                 f"{schedule.compute_count} computes per block")
    return report


def run_cached_closed_loop(denoiser: ToyDenoiser, schedule: CacheSchedule, strategy: StrategyConfig,
                           basis_source: Union[None, BasisStore, TrajectoryRecord, BasisProvider] = None) -> RunReport:
    """
    Cached sampling where predicted block outputs drive the latent update.

    At skipped steps the last block's prediction replaces the network output.
    The true outputs at the current latent are still evaluated for the error
    rows and for ``recompute`` rules; they are not counted as reads. The
    final latent is compared against an uncached run of the same denoiser.

    Raises:
        ValidationError: Schedule length mismatch
        EngineError: Missing basis or shape drift
    """
    _check_schedule(schedule, denoiser.T)
    reference_blocks, reference_final = denoiser.run()
    reference = TrajectoryRecord(blocks=reference_blocks,
                                 provenance={'kind': 'toy_denoiser', 'source_id': f"denoiser-seed{denoiser.cfg.seed}"})
    provider = _as_provider(basis_source, reference, strategy)
    report = RunReport(strategy=strategy, schedule=schedule, blocks=denoiser.cfg.L, source_id=reference.source_id)

    caches = [BlockCache(block, strategy, provider) for block in range(denoiser.cfg.L)]
    rows: List[List[StepRecord]] = [[] for _ in caches]
    x = denoiser.x_T
    for step in range(schedule.total_steps):
        outputs = denoiser.block_outputs(x, step)
        if schedule.is_compute(step):
            for cache, F in zip(caches, outputs):
                fraction = cache.observe(step, F)
                rows[cache.block].append(StepRecord(cache.block, step, True, 0.0, 1.0, fraction))
            eps = denoiser.eps_from_output(outputs[-1], x, step)
        else:
            predicted = []
            for cache, truth in zip(caches, outputs):
                F_hat, fraction = cache.predict(step, truth if cache.needs_truth else None)
                predicted.append(F_hat)
                rows[cache.block].append(StepRecord(cache.block, step, False, _step_error(F_hat, truth),
                                                    similarity(F_hat, truth).product, fraction))
            eps = denoiser.eps_from_output(predicted[-1], x, step)
        x = denoiser.update(x, eps, step)

    for cache in caches:
        report.rows.extend(rows[cache.block])
        report.true_reads[cache.block] = cache.reads
    report.final_latent_rel_error = _step_error(x, reference_final)
    logger.debug(f"Closed loop {strategy.label} N={schedule.interval}: "
                 f"final latent error {report.final_latent_rel_error:.4e}")
    return report


def ablation_grid(trajectory: TrajectoryRecord, schedule: CacheSchedule, tau_list: Sequence[float],
                  strategy_list: Sequence[StrategyConfig],
                  basis_source: Union[None, BasisStore, TrajectoryRecord] = None,
                  jobs: int = 1, progress: bool = False) -> List[RunReport]:
    """
    Run every (strategy, tau) cell.

    Cells are ordered strategy-major, then by tau, regardless of ``jobs``.
    Each cell owns its predictors and basis provider.

    Raises:
        ValidationError: Empty tau or strategy list
    """
    if not tau_list or not strategy_list:
        raise ValidationError("ablation_grid needs nonempty tau and strategy lists",
                              {'taus': len(tau_list), 'strategies': len(strategy_list)})
    cells = [replace(strategy, tau=float(tau)) for strategy in strategy_list for tau in tau_list]

    def run_cell(cell: StrategyConfig) -> RunReport:
        return run_cached(trajectory, schedule, cell, basis_source)

    if jobs <= 1:
        return [run_cell(cell) for cell in tqdm(cells, desc="grid", disable=not progress)]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        return list(tqdm(executor.map(run_cell, cells), total=len(cells), desc="grid", disable=not progress))
