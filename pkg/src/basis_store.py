"""
Reference spectral bases: one-time extraction, persistence and the principal/residual split.

A basis is built once from a reference trajectory and then reused for any
other input that shares its right singular structure. The split itself uses
the projection form ``F V_k V_k^T``; the explicit left-factor path
``U = F V_C diag(sigma_C)^-1`` is kept alongside it for fidelity checks.
"""

import os
from dataclasses import dataclass, asdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.error_handler import BasisError, LinalgError, ValidationError, setup_logger
from src.file_formats import (
    BASIS_MAGIC, FORMAT_VERSION, GLOBAL_STEP_ID, atomic_write_bytes, atomic_write_json,
    crc32, decode_basis, encode_basis, read_bytes, read_sidecar, sidecar_path,
)
from src.linalg import (
    ORTHONORMAL_TOL, ZERO_TRIM_RATIO, as_feature_matrix, check_orthonormal,
    frobenius_norm, project_onto_basis, select_rank, thin_svd,
)
from src.metrics import similarity

logger = setup_logger('svdcache.basis_store')

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """
    Cached right singular vectors ``V`` (D x r) and singular values ``sigma``.

    ``step_id`` is ``GLOBAL_STEP_ID`` (-1) for a basis shared by every step of a block.
    """

    V: np.ndarray
    sigma: np.ndarray
    block_id: int
    step_id: int
    source_id: str
    tau: float
    k_default: int

    def __post_init__(self):
        V = np.asarray(self.V, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64).ravel()
        if V.ndim != 2 or V.shape[1] == 0 or sigma.size == 0:
            raise BasisError("Spectral basis must hold at least one singular vector",
                             {'V_shape': V.shape, 'r': sigma.size})
        if V.shape[1] != sigma.size:
            raise BasisError(f"V has {V.shape[1]} columns but sigma has {sigma.size} entries",
                             {'V_shape': V.shape, 'r': sigma.size})
        if not np.all(np.isfinite(sigma)) or np.any(sigma < 0) or np.any(np.diff(sigma) > 0):
            raise BasisError("Singular values must be finite, nonnegative and nonincreasing",
                             {'block_id': self.block_id, 'step_id': self.step_id})
        try:
            check_orthonormal(V, tol=ORTHONORMAL_TOL, name="V_C")
        except ValidationError as e:
            raise BasisError(f"Basis invariant violated: {e.message}", e.details)
        if not 1 <= int(self.k_default) <= sigma.size:
            raise BasisError(f"k_default={self.k_default} is outside [1, {sigma.size}]",
                             {'k_default': self.k_default, 'r': sigma.size})
        if not 0.0 < float(self.tau) <= 1.0:
            raise BasisError(f"Stored tau={self.tau} is outside (0, 1]", {'tau': self.tau})
        object.__setattr__(self, 'V', V)
        object.__setattr__(self, 'sigma', sigma)
        object.__setattr__(self, 'block_id', int(self.block_id))
        object.__setattr__(self, 'step_id', int(self.step_id))
        object.__setattr__(self, 'k_default', int(self.k_default))
        object.__setattr__(self, 'tau', float(self.tau))

    @property
    def D(self) -> int:
        return int(self.V.shape[0])

    @property
    def r(self) -> int:
        return int(self.sigma.size)

    @property
    def is_global(self) -> bool:
        return self.step_id == GLOBAL_STEP_ID

    @property
    def key(self) -> Tuple[int, int]:
        return (self.block_id, self.step_id)

    def metadata(self) -> Dict[str, Any]:
        """Sidecar fields (everything except sigma and V)."""
        return {
            'magic': BASIS_MAGIC.decode('ascii'),
            'version': FORMAT_VERSION,
            'block_id': self.block_id,
            'step_id': 'global' if self.is_global else self.step_id,
            'source_id': self.source_id,
            'D': self.D,
            'r': self.r,
            'tau': self.tau,
            'k_default': self.k_default,
        }

    def same_as(self, other: 'SpectralBasis') -> bool:
        """Field-exact equality, arrays compared bitwise."""
        return (self.block_id == other.block_id and self.step_id == other.step_id
                and self.source_id == other.source_id and self.tau == other.tau
                and self.k_default == other.k_default
                and self.V.shape == other.V.shape and self.sigma.shape == other.sigma.shape
                and self.V.tobytes() == other.V.tobytes()
                and self.sigma.tobytes() == other.sigma.tobytes())


@dataclass(frozen=True)
class SubspaceSplit:
    """Principal part ``F V_k V_k^T`` and its orthogonal residual."""

    principal: np.ndarray
    residual: np.ndarray
    k: int
    principal_energy_fraction: float

    @property
    def residual_energy_fraction(self) -> float:
        return max(0.0, 1.0 - self.principal_energy_fraction)

    def recombine(self) -> np.ndarray:
        return self.principal + self.residual


def build_reference_basis(F_ref, tau: float, block_id: int, step_id: int,
                          source_id: str, method: str = 'lapack') -> SpectralBasis:
    """
    Run the one-time SVD on a reference feature matrix.

    The basis keeps every singular pair above the zero-trim floor, and records
    the rank ``k_default`` that reaches energy fraction ``tau``.

    Raises:
        ValidationError: Non-finite input or tau outside (0, 1]
        LinalgError: Zero reference matrix or SVD failure
    """
    factors = thin_svd(F_ref, method=method).trimmed()
    if factors.r == 0:
        raise LinalgError("Reference matrix is zero; no basis can be extracted",
                          {'block_id': block_id, 'step_id': step_id, 'source_id': source_id})
    k_default = select_rank(factors.sigma, tau)
    logger.debug(f"Basis block={block_id} step={step_id}: r={factors.r}, k_default={k_default} at tau={tau}")
    return SpectralBasis(V=factors.V, sigma=factors.sigma, block_id=block_id, step_id=step_id,
                         source_id=str(source_id), tau=tau, k_default=k_default)


def _check_channels(F: np.ndarray, basis: SpectralBasis) -> None:
    if F.shape[1] != basis.D:
        raise ValidationError(
            f"Feature has {F.shape[1]} channels but basis was built for D={basis.D}",
            {'feature_cols': F.shape[1], 'basis_D': basis.D, 'block_id': basis.block_id}
        )


def _resolve_rank(basis: SpectralBasis, k: Optional[int]) -> int:
    if k is None:
        return basis.k_default
    if not isinstance(k, (int, np.integer)) or k < 1 or k > basis.r:
        raise ValidationError(f"Rank k={k} is outside [1, {basis.r}]", {'k': k, 'r': basis.r})
    return int(k)


def reconstruct_left_factors(F, basis: SpectralBasis) -> np.ndarray:
    """
    Approximate left singular matrix ``U = F V_C diag(sigma_C)^-1``.

    Each sigma is clamped below at ``1e-12 * sigma_1`` before inversion.

    Returns:
        N x r matrix
    """
    A = as_feature_matrix(F)
    _check_channels(A, basis)
    floor = ZERO_TRIM_RATIO * basis.sigma[0]
    clamped = np.maximum(basis.sigma, floor)
    n_clamped = int(np.count_nonzero(basis.sigma < floor))
    if n_clamped:
        logger.warning(f"Clamped {n_clamped} singular values at {floor:.3e} before inversion")
    return (A @ basis.V) / clamped


def recombine_principal(U: np.ndarray, basis: SpectralBasis, k: Optional[int] = None) -> np.ndarray:
    """Rank-k feature ``U_k diag(sigma_k) V_k^T`` from reconstructed left factors."""
    k = _resolve_rank(basis, k)
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] < k:
        raise ValidationError(f"Left factors of shape {U.shape} cannot supply rank {k}",
                              {'U_shape': U.shape, 'k': k})
    return (U[:, :k] * basis.sigma[:k]) @ basis.V[:, :k].T


def split(F, basis: SpectralBasis, k: Optional[int] = None) -> SubspaceSplit:
    """
    Decompose F into its projection on the first k basis vectors and the orthogonal residual.

    Args:
        F: Feature matrix (N x D)
        basis: Reference basis with matching D
        k: Rank, defaults to ``basis.k_default``

    Returns:
        SubspaceSplit

    Raises:
        ValidationError: Channel mismatch or k outside [1, r]
    """
    A = as_feature_matrix(F)
    _check_channels(A, basis)
    k = _resolve_rank(basis, k)
    principal = project_onto_basis(A, basis.V[:, :k])
    residual = A - principal
    total = frobenius_norm(A) ** 2
    # A zero feature has nothing to split; report it as fully residual.
    fraction = frobenius_norm(principal) ** 2 / total if total > 0.0 else 0.0
    return SubspaceSplit(principal=principal, residual=residual, k=k,
                         principal_energy_fraction=float(fraction))


def save_basis(basis: SpectralBasis, path: str) -> None:
    """Write ``SVDC`` bytes and the JSON sidecar atomically."""
    data = encode_basis(basis.block_id, basis.step_id, basis.tau, basis.k_default, basis.sigma, basis.V)
    atomic_write_bytes(path, data)
    meta = basis.metadata()
    meta['crc32'] = crc32(data[:-4])
    atomic_write_json(sidecar_path(path), meta)
    logger.debug(f"Saved basis {basis.key} to {path}")


def load_basis(path: str) -> SpectralBasis:
    """
    Read a basis written by :func:`save_basis`.

    The source identifier lives only in the sidecar; when the sidecar is
    present its metadata must agree with the binary header.

    Raises:
        FileNotFoundError: Missing file
        MalformedFileError, VersionMismatchError, ChecksumError: Codec failures
        BasisError: Invariant violations (including r = 0) or sidecar disagreement
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Basis file not found: {path}")
    fields = decode_basis(read_bytes(path))
    if fields['V'].shape[1] == 0:
        raise BasisError(f"Basis file {path} declares rank 0", {'path': path})

    meta = read_sidecar(path)
    if meta:
        step_meta = GLOBAL_STEP_ID if meta.get('step_id') == 'global' else meta.get('step_id')
        expected = {'block_id': fields['block_id'], 'step_id': fields['step_id'],
                    'k_default': fields['k_default'], 'r': fields['V'].shape[1]}
        found = {'block_id': meta.get('block_id'), 'step_id': step_meta,
                 'k_default': meta.get('k_default'), 'r': meta.get('r')}
        if expected != found:
            raise BasisError(f"Sidecar metadata disagrees with {path}", {'binary': expected, 'sidecar': found})

    return SpectralBasis(V=fields['V'], sigma=fields['sigma'], block_id=fields['block_id'],
                         step_id=fields['step_id'], source_id=str(meta.get('source_id', '')),
                         tau=fields['tau'], k_default=fields['k_default'])


@dataclass(frozen=True)
class BasisSimilarity:
    """Cross-basis stability scores, all in [0, 1]."""

    per_vector: np.ndarray
    sigma_similarity: float
    summary: float

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['per_vector'] = [float(x) for x in self.per_vector]
        return d


def basis_similarity(a: SpectralBasis, b: SpectralBasis) -> BasisSimilarity:
    """
    Compare two bases vector by vector and by spectrum.

    Per-vector similarity is ``|<V_a[:, i], V_b[:, i]>|`` for ``i < min(r_a, r_b)``.
    The spectrum score is cosine times min/max norm ratio of the (zero-padded)
    singular values. The summary weights per-vector scores by the mean of the
    two bases' normalized energies ``sigma_i^2`` rather than by the energies of
    ``a`` alone, so it is symmetric in a and b.

    Raises:
        ValidationError: If the bases have different D
    """
    if a.D != b.D:
        raise ValidationError(f"Bases have different channel counts: {a.D} vs {b.D}",
                              {'D_a': a.D, 'D_b': b.D})
    m = min(a.r, b.r)
    per_vector = np.clip(np.abs(np.sum(a.V[:, :m] * b.V[:, :m], axis=0)), 0.0, 1.0)

    width = max(a.r, b.r)
    sa = np.zeros(width)
    sb = np.zeros(width)
    sa[:a.r] = a.sigma
    sb[:b.r] = b.sigma
    sigma_sim = float(np.clip(similarity(sa, sb).product, 0.0, 1.0))

    ea = a.sigma[:m] ** 2
    eb = b.sigma[:m] ** 2
    weights = ea / ea.sum() + eb / eb.sum()
    summary = float(np.clip(np.dot(weights, per_vector) / weights.sum(), 0.0, 1.0))
    return BasisSimilarity(per_vector=per_vector, sigma_similarity=sigma_sim, summary=summary)


class BasisStore:
    """
    Directory of bases keyed by (block_id, step_id) with a ``manifest.json`` index.

    File names are ``basis_b{block}_s{step}.svdc`` (``sglobal`` for global bases).
    Writes are atomic; concurrent writers to one key are last-writer-wins.
    """

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    @staticmethod
    def file_name(block_id: int, step_id: int) -> str:
        step = 'global' if step_id == GLOBAL_STEP_ID else str(int(step_id))
        return f"basis_b{int(block_id)}_s{step}.svdc"

    def path_for(self, block_id: int, step_id: int) -> str:
        return os.path.join(self.root, self.file_name(block_id, step_id))

    def has(self, block_id: int, step_id: int) -> bool:
        return os.path.exists(self.path_for(block_id, step_id))

    def put(self, basis: SpectralBasis) -> str:
        path = self.path_for(basis.block_id, basis.step_id)
        save_basis(basis, path)
        return path

    def get(self, block_id: int, step_id: int) -> SpectralBasis:
        """
        Raises:
            BasisError: If no basis is stored for the key
        """
        path = self.path_for(block_id, step_id)
        if not os.path.exists(path):
            raise BasisError(f"No basis stored for block {block_id}, step {step_id}",
                             {'block_id': block_id, 'step_id': step_id, 'root': self.root})
        return load_basis(path)

    def keys(self) -> List[Tuple[int, int]]:
        """Stored (block_id, step_id) keys in sorted order."""
        found = []
        for name in os.listdir(self.root):
            if not (name.startswith('basis_b') and name.endswith('.svdc')):
                continue
            block_part, step_part = name[len('basis_b'):-len('.svdc')].split('_s', 1)
            step = GLOBAL_STEP_ID if step_part == 'global' else int(step_part)
            found.append((int(block_part), step))
        return sorted(found)

    def write_manifest(self, extra: Optional[Dict[str, Any]] = None) -> str:
        """Write ``manifest.json`` listing every stored basis file."""
        entries = []
        for block_id, step_id in self.keys():
            meta = read_sidecar(self.path_for(block_id, step_id))
            entries.append({
                'file': self.file_name(block_id, step_id),
                'block_id': block_id,
                'step_id': 'global' if step_id == GLOBAL_STEP_ID else step_id,
                'r': meta.get('r'),
                'k_default': meta.get('k_default'),
                'source_id': meta.get('source_id'),
            })
        manifest = {'count': len(entries), 'bases': entries}
        if extra:
            manifest.update(extra)
        path = os.path.join(self.root, MANIFEST_NAME)
        atomic_write_json(path, manifest)
        logger.info(f"Wrote manifest with {len(entries)} bases to {path}")
        return path

    def lookup(self, block_id: int, step_id: int) -> SpectralBasis:
        """Per-step basis if stored, else the block's global basis."""
        if self.has(block_id, step_id):
            return self.get(block_id, step_id)
        if self.has(block_id, GLOBAL_STEP_ID):
            return self.get(block_id, GLOBAL_STEP_ID)
        raise BasisError(f"No basis for block {block_id} at step {step_id} and no global fallback",
                         {'block_id': block_id, 'step_id': step_id, 'root': self.root})
