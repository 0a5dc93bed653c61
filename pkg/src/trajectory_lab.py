"""
Ground-truth feature trajectories for cache experiments.

Two sources are provided:

* ``synth_generate`` plants a principal subspace ``V_P`` shared across
  prompts (same ``basis_seed``) and an orthogonal residual subspace. The
  principal part is a large prompt-specific static component, a small
  component rotating at ``drift_rate`` and step-to-step jitter. Static,
  moving and residual parts occupy disjoint token directions, so each step's
  SVD separates them exactly (requires ``N > 2 * planted_rank``). The residual
  part oscillates at ``oscillation_freq`` on top of a slow excursion that
  leaves and returns to its starting pattern. The residual is scaled so that
  the principal part carries a fraction ``energy_split`` of the energy on
  average.
* ``ToyDenoiser`` is a fixed-weight L-block residual network iterated with the
  reverse update ``x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - ab_t) eps) / sqrt(a_t) + s_t z``.
  Block outputs (running branch sums, input latent excluded) form the
  trajectory; the last one is a clean-sample prediction from which ``eps``
  is derived.

Analysis helpers produce PCA traces and smoothness statistics per subspace.
"""

import os
from dataclasses import dataclass, asdict, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq
from sklearn.decomposition import PCA

from src.basis_store import SpectralBasis, build_reference_basis, split
from src.error_handler import TrajectoryError, ValidationError, setup_logger
from src.file_formats import (
    atomic_write_bytes, atomic_write_json, decode_trajectory, encode_trajectory,
    read_bytes, read_sidecar, sidecar_path,
)
from src.linalg import frobenius_norm

logger = setup_logger('svdcache.trajectory_lab')

DEFAULT_TAU = 0.85
SAMPLERS = ('ddpm', 'ddim')
SUBSPACE_PARTS = ('full', 'principal', 'residual')


@dataclass(frozen=True)
class SynthConfig:
    """Planted-dynamics generator settings."""

    N: int = 64
    D: int = 64
    T: int = 50
    blocks: int = 4
    planted_rank: int = 6
    energy_split: float = 0.9
    drift_rate: float = 0.05
    oscillation_freq: float = 0.45
    seed: int = 0
    # Prompts sharing basis_seed share V_P and the singular value profile.
    basis_seed: int = 0
    spectrum_decay: float = 0.922
    jitter: float = 0.3
    drift_amplitude: float = 0.035
    residual_trend: float = 4.0

    def validate(self) -> None:
        """
        Raises:
            TrajectoryError: For infeasible shapes, rank or energy split
        """
        for name in ('N', 'D', 'T', 'blocks'):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise TrajectoryError(f"{name} must be a positive integer, got {value}", {name: value})
        if self.T < 2:
            raise TrajectoryError(f"Synthetic trajectories need T >= 2, got {self.T}", {'T': self.T})
        if not isinstance(self.planted_rank, int) or not 1 <= self.planted_rank < min(self.N, self.D):
            raise TrajectoryError(
                f"planted_rank must satisfy 1 <= k* < min(N, D) = {min(self.N, self.D)}, got {self.planted_rank}",
                {'planted_rank': self.planted_rank, 'N': self.N, 'D': self.D})
        if 2 * self.planted_rank >= self.N:
            raise TrajectoryError(
                f"planted_rank needs 2 * k* < N to leave residual token rows, got k*={self.planted_rank}, N={self.N}",
                {'planted_rank': self.planted_rank, 'N': self.N})
        if not 0.0 < self.energy_split < 1.0:
            raise TrajectoryError(f"energy_split must be in (0, 1), got {self.energy_split}",
                                  {'energy_split': self.energy_split})
        if not 0.0 < self.spectrum_decay <= 1.0:
            raise TrajectoryError(f"spectrum_decay must be in (0, 1], got {self.spectrum_decay}")
        for name in ('jitter', 'drift_amplitude', 'residual_trend', 'drift_rate', 'oscillation_freq'):
            if getattr(self, name) < 0:
                raise TrajectoryError(f"{name} must be nonnegative", {name: getattr(self, name)})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class DenoiserConfig:
    """Toy reverse-process settings; ``eta = 0`` makes sampling deterministic."""

    N: int = 64
    D: int = 64
    L: int = 4
    T: int = 50
    seed: int = 0
    alpha_bar_start: float = 0.9999
    alpha_bar_end: float = 0.01
    eta: float = 1.0
    sampler: str = 'ddpm'
    block_gain: float = 0.5
    # Rank of the per-block content pattern the branches write.
    content_rank: int = 4
    # Per-step, per-token gate noise on every branch.
    gate_jitter: float = 0.3
    input_gain: float = 0.2

    def validate(self) -> None:
        for name in ('N', 'D', 'L', 'T'):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value}", {name: value})
        if not 0.0 < self.alpha_bar_end < self.alpha_bar_start < 1.0:
            raise ValidationError("Need 0 < alpha_bar_end < alpha_bar_start < 1",
                                  {'alpha_bar_start': self.alpha_bar_start, 'alpha_bar_end': self.alpha_bar_end})
        if self.eta < 0:
            raise ValidationError(f"eta must be nonnegative, got {self.eta}", {'eta': self.eta})
        if self.sampler not in SAMPLERS:
            raise ValidationError(f"Unknown sampler {self.sampler}", {'sampler': self.sampler, 'allowed': SAMPLERS})
        if not isinstance(self.content_rank, int) or not 1 <= self.content_rank <= min(self.N, self.D):
            raise ValidationError(f"content_rank must be in [1, min(N, D)], got {self.content_rank}",
                                  {'content_rank': self.content_rank, 'N': self.N, 'D': self.D})
        for name in ('block_gain', 'gate_jitter', 'input_gain'):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative", {name: getattr(self, name)})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrajectoryRecord:
    """Per-block feature matrices ``blocks[l][t]`` for steps 0..T-1."""

    blocks: List[List[np.ndarray]]
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.blocks or not self.blocks[0]:
            raise TrajectoryError("Trajectory must have at least one block and one step")
        T = len(self.blocks[0])
        shape = self.blocks[0][0].shape
        for l, steps in enumerate(self.blocks):
            if len(steps) != T:
                raise TrajectoryError(f"Block {l} has {len(steps)} steps, expected {T}", {'block': l})
            for t, F in enumerate(steps):
                if F.shape != shape:
                    raise TrajectoryError(f"Block {l} step {t} has shape {F.shape}, expected {shape}",
                                          {'block': l, 'step': t})

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def T(self) -> int:
        return len(self.blocks[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.blocks[0][0].shape

    @property
    def source_id(self) -> str:
        return str(self.provenance.get('source_id', 'unknown'))

    def feature(self, block: int, step: int) -> np.ndarray:
        if not 0 <= block < self.L:
            raise ValidationError(f"Block {block} does not exist (L={self.L})", {'block': block, 'L': self.L})
        if not 0 <= step < self.T:
            raise ValidationError(f"Step {step} is outside [0, {self.T})", {'step': step, 'T': self.T})
        return self.blocks[block][step]

    def save(self, path: str) -> None:
        """Write the ``SVCT`` container and the provenance sidecar."""
        atomic_write_bytes(path, encode_trajectory(self.blocks))
        L, T = self.L, self.T
        N, D = self.shape
        atomic_write_json(sidecar_path(path), {'L': L, 'T': T, 'N': N, 'D': D, 'provenance': self.provenance})
        logger.info(f"Saved trajectory {self.source_id} ({L} blocks x {T} steps) to {path}")

    @classmethod
    def load(cls, path: str) -> 'TrajectoryRecord':
        if not os.path.exists(path):
            raise FileNotFoundError(f"Trajectory file not found: {path}")
        _, blocks = decode_trajectory(read_bytes(path))
        meta = read_sidecar(path)
        provenance = dict(meta.get('provenance', {}))
        provenance.setdefault('source_id', os.path.basename(path))
        return cls(blocks=blocks, provenance=provenance)


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((rows, cols)))
    return Q * np.sign(np.diag(R))


def _unit(rng: np.random.Generator, shape) -> np.ndarray:
    G = rng.standard_normal(shape)
    return G / np.linalg.norm(G)


def planted_basis(cfg: SynthConfig, block: int) -> Tuple[np.ndarray, np.ndarray]:
    """(V_P, V_perp) for one block; depends only on ``basis_seed`` and the block index."""
    rng = np.random.default_rng([cfg.basis_seed, block, 7])
    V_full = _orthonormal(rng, cfg.D, cfg.D)
    return V_full[:, :cfg.planted_rank], V_full[:, cfg.planted_rank:]


def planted_spectrum(cfg: SynthConfig) -> np.ndarray:
    s = cfg.spectrum_decay ** np.arange(cfg.planted_rank, dtype=np.float64)
    return s / np.linalg.norm(s)


def _calibrate_residual_scale(principal_energy: np.ndarray, residual_energy: np.ndarray, rho: float) -> float:
    """Scale c with mean_t P_t / (P_t + c^2 E_t) = rho."""
    if np.all(residual_energy == 0.0):
        raise TrajectoryError("Residual shape is identically zero; energy split cannot be met",
                              {'energy_split': rho})

    def gap(x: float) -> float:
        return float(np.mean(principal_energy / (principal_energy + x * residual_energy))) - rho

    upper = 1.0
    while gap(upper) > 0.0:
        upper *= 4.0
        if upper > 1e30:
            raise TrajectoryError("Could not bracket the residual scale", {'energy_split': rho})
    return float(np.sqrt(brentq(gap, 0.0, upper, xtol=1e-15, rtol=1e-13)))


def _synth_block(cfg: SynthConfig, block: int) -> List[np.ndarray]:
    V_P, V_perp = planted_basis(cfg, block)
    s = planted_spectrum(cfg)
    rng = np.random.default_rng([cfg.seed, block, 11])
    N, k, m, T = cfg.N, cfg.planted_rank, cfg.D - cfg.planted_rank, cfg.T

    # Token space splits into static, moving and residual rows so the parts never share a left direction.
    Q = _orthonormal(rng, N, N)
    U_static, U_move, U_perp = Q[:, :k], Q[:, k:2 * k], Q[:, 2 * k:]
    static = U_static * s
    Z1, Z2 = _unit(rng, (k, k)), _unit(rng, (k, k))
    jitter = rng.standard_normal((T, k, k)) * (cfg.jitter / k)

    B = rng.standard_normal((N - 2 * k, m))
    B *= np.sqrt(2.0) / np.linalg.norm(B)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=m)
    H1, H2 = _unit(rng, (N - 2 * k, m)), _unit(rng, (N - 2 * k, m))

    t = np.arange(T, dtype=np.float64)
    theta = cfg.drift_rate * t
    swing = np.pi * np.sin(np.pi * t / (T - 1))

    principal, residual = [], []
    for i in range(T):
        moving = cfg.drift_amplitude * (np.cos(theta[i]) * Z1 + np.sin(theta[i]) * Z2) + jitter[i]
        C = static + U_move @ moving
        E = B * np.sin(2.0 * np.pi * cfg.oscillation_freq * t[i] + phases)
        E = E + cfg.residual_trend * (np.cos(swing[i]) * H1 + np.sin(swing[i]) * H2)
        principal.append(C @ V_P.T)
        residual.append(U_perp @ E @ V_perp.T)

    p_energy = np.array([np.vdot(P, P) for P in principal])
    e_energy = np.array([np.vdot(E, E) for E in residual])
    c = _calibrate_residual_scale(p_energy, e_energy, cfg.energy_split)
    return [P + c * E for P, E in zip(principal, residual)]


def synth_generate(cfg: SynthConfig) -> TrajectoryRecord:
    """
    Generate a planted trajectory; deterministic per (seed, basis_seed).

    Raises:
        TrajectoryError: Infeasible configuration
    """
    cfg.validate()
    blocks = [_synth_block(cfg, l) for l in range(cfg.blocks)]
    provenance = {'kind': 'synth', 'config': cfg.to_dict(), 'seed': cfg.seed,
                  'source_id': f"synth-seed{cfg.seed}"}
    logger.debug(f"Generated synthetic trajectory seed={cfg.seed}: {cfg.blocks} blocks, T={cfg.T}")
    return TrajectoryRecord(blocks=blocks, provenance=provenance)


def linear_alpha_bar(T: int, start: float = 0.9999, end: float = 0.01) -> np.ndarray:
    """Cumulative schedule ``ab_t`` for t = 1..T, linear from start to end."""
    if T == 1:
        return np.array([end], dtype=np.float64)
    return np.linspace(start, end, T, dtype=np.float64)


def forward_noise(x0, alpha_bar_t: float, eps) -> np.ndarray:
    """Forward corruption ``x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps``."""
    if not 0.0 < alpha_bar_t <= 1.0:
        raise ValidationError(f"alpha_bar_t must be in (0, 1], got {alpha_bar_t}", {'alpha_bar_t': alpha_bar_t})
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    return np.sqrt(alpha_bar_t) * x0 + np.sqrt(1.0 - alpha_bar_t) * eps


class ToyDenoiser:
    """
    Fixed random-weight residual network iterated under the reverse update.

    Each block adds a gated branch ``g * block_gain * tanh(input_gain * A (x + f) W / sqrt(2) + C_l)``
    to the running branch sum ``f``; block ``l`` outputs the sum after its
    branch, without the input latent. The last output is read as the clean
    prediction ``x0_hat`` and converted to noise for the sampler.

    Trajectory step ``s`` (0..T-1) denoises timestep ``t = T - s``. Weights,
    gates, initial noise and per-step sampling noise are drawn once at
    construction, so every run from the same instance sees identical randomness.
    """

    def __init__(self, cfg: DenoiserConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        N, D, L, T, r = cfg.N, cfg.D, cfg.L, cfg.T, cfg.content_rank

        self.alpha_bar = linear_alpha_bar(T, cfg.alpha_bar_start, cfg.alpha_bar_end)
        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.alpha = self.alpha_bar / prev
        if np.any(np.diff(self.alpha) >= 0):
            raise ValidationError("Per-step alpha_t must be strictly decreasing")

        self.token_mix = [np.eye(N) + rng.standard_normal((N, N)) / np.sqrt(N) for _ in range(L)]
        self.channel_mix = [rng.standard_normal((D, D)) / np.sqrt(D) for _ in range(L)]
        # Unit entry RMS; channel directions are shared by all blocks.
        V_c = _orthonormal(rng, D, r)
        scale = np.sqrt(N * D / r)
        self.content = [(_orthonormal(rng, N, r) * scale) @ V_c.T for _ in range(L)]
        self.gates = 1.0 + cfg.gate_jitter * rng.standard_normal((T, L, N))
        self.x_T = rng.standard_normal((N, D))
        self.noise = rng.standard_normal((T, N, D))

    @property
    def T(self) -> int:
        return self.cfg.T

    def timestep(self, step: int) -> int:
        return self.cfg.T - step

    def block_outputs(self, x: np.ndarray, step: int) -> List[np.ndarray]:
        """Running branch sums after every block for latent x at trajectory step ``step``."""
        f = np.zeros_like(x)
        outputs = []
        for l, (A, W, C) in enumerate(zip(self.token_mix, self.channel_mix, self.content)):
            pre = self.cfg.input_gain * (A @ (x + f)) @ W / np.sqrt(2.0) + C
            f = f + self.gates[step, l][:, None] * self.cfg.block_gain * np.tanh(pre)
            outputs.append(f)
        return outputs

    def eps_from_output(self, x0_hat: np.ndarray, x: np.ndarray, step: int) -> np.ndarray:
        """Noise implied by the clean prediction at the current timestep."""
        ab_t = self.alpha_bar[self.timestep(step) - 1]
        return (x - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)

    def update(self, x: np.ndarray, eps: np.ndarray, step: int) -> np.ndarray:
        """One reverse step from timestep t to t - 1."""
        i = self.timestep(step) - 1
        ab_t = self.alpha_bar[i]
        ab_prev = self.alpha_bar[i - 1] if i > 0 else 1.0
        a_t = self.alpha[i]
        sigma = self.cfg.eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - a_t))
        z = self.noise[step]
        if self.cfg.sampler == 'ddim':
            x0_pred = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
            direction = np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
            return np.sqrt(ab_prev) * x0_pred + direction + sigma * z
        mean = (x - (1.0 - a_t) / np.sqrt(1.0 - ab_t) * eps) / np.sqrt(a_t)
        return mean + sigma * z

    def run(self, x_T: Optional[np.ndarray] = None) -> Tuple[List[List[np.ndarray]], np.ndarray]:
        """Uncached reference run; returns (blocks[l][t], final latent)."""
        x = self.x_T if x_T is None else np.asarray(x_T, dtype=np.float64)
        blocks: List[List[np.ndarray]] = [[] for _ in range(self.cfg.L)]
        for step in range(self.cfg.T):
            outputs = self.block_outputs(x, step)
            for l, f in enumerate(outputs):
                blocks[l].append(f)
            x = self.update(x, self.eps_from_output(outputs[-1], x, step), step)
        return blocks, x


def toy_denoiser_run(cfg: DenoiserConfig, x_T: Optional[np.ndarray] = None) -> Tuple[TrajectoryRecord, np.ndarray]:
    """
    Run the toy denoiser without caching.

    Returns:
        (TrajectoryRecord of block outputs, final latent x_0)
    """
    model = ToyDenoiser(cfg)
    blocks, final = model.run(x_T)
    provenance = {'kind': 'toy_denoiser', 'config': cfg.to_dict(), 'seed': cfg.seed,
                  'source_id': f"denoiser-seed{cfg.seed}"}
    return TrajectoryRecord(blocks=blocks, provenance=provenance), final


def _part_sequence(rec: TrajectoryRecord, block: int, basis: Optional[SpectralBasis],
                   k: Optional[int], part: str) -> List[np.ndarray]:
    if part not in SUBSPACE_PARTS:
        raise ValidationError(f"Unknown part {part}", {'part': part, 'allowed': SUBSPACE_PARTS})
    if not 0 <= block < rec.L:
        raise ValidationError(f"Block {block} does not exist (L={rec.L})", {'block': block})
    steps = rec.blocks[block]
    if part == 'full' or basis is None:
        return list(steps)
    parts = [split(F, basis, k) for F in steps]
    return [p.principal if part == 'principal' else p.residual for p in parts]


def pca_trace(rec: TrajectoryRecord, block: int, basis: Optional[SpectralBasis] = None,
              k: Optional[int] = None, part: str = 'principal') -> np.ndarray:
    """
    Project each step (or its principal/residual part) onto the top-2 PCA directions.

    Without a basis the full features are traced.

    Returns:
        T x 2 array of trace coordinates

    Raises:
        TrajectoryError: Fewer than 3 steps
    """
    if rec.T < 3:
        raise TrajectoryError(f"PCA trace needs at least 3 steps, got {rec.T}", {'T': rec.T})
    X = np.stack([F.ravel() for F in _part_sequence(rec, block, basis, k, part)])
    centered = X - X.mean(axis=0)
    if not np.any(centered):
        return np.zeros((rec.T, 2))
    n_components = min(2, X.shape[0], X.shape[1])
    coords = PCA(n_components=n_components, svd_solver='full').fit_transform(X)
    if n_components < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - n_components))])
    return coords


def path_ratio(points: np.ndarray) -> float:
    """Path length over end-to-end displacement; 1.0 for a motionless path."""
    steps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    length = float(steps.sum())
    displacement = float(np.linalg.norm(points[-1] - points[0]))
    if length == 0.0:
        return 1.0
    if displacement == 0.0:
        return float('inf')
    return length / displacement


def _sequence_stats(seq: List[np.ndarray]) -> Dict[str, float]:
    changes = []
    for prev, cur in zip(seq[:-1], seq[1:]):
        denom = frobenius_norm(prev)
        changes.append(frobenius_norm(cur - prev) / denom if denom > 0.0 else 0.0)
    flat = np.stack([F.ravel() for F in seq])
    return {
        'mean_relative_change': float(np.mean(changes)) if changes else 0.0,
        'path_ratio': path_ratio(flat),
    }


def smoothness_stats(rec: TrajectoryRecord, block: int, basis: Optional[SpectralBasis] = None,
                     k: Optional[int] = None, tau: float = DEFAULT_TAU) -> Dict[str, Dict[str, float]]:
    """
    Step-to-step relative change and path-length/displacement ratio per subspace.

    Without a basis, one is built from the block's step-0 feature at ``tau``.

    Returns:
        {'full': {...}, 'principal': {...}, 'residual': {...}}, each with
        ``mean_relative_change`` and ``path_ratio``
    """
    if basis is None:
        basis = build_reference_basis(rec.feature(block, 0), tau, block, 0, rec.source_id)
    return {part: _sequence_stats(_part_sequence(rec, block, basis, k, part)) for part in SUBSPACE_PARTS}
