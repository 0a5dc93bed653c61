"""
Small-size invariant suites run by ``main.py selftest``.

Every suite is a function that raises on failure through numpy testing
assertions or domain errors. ``run_selftest`` runs them all and reports one
result per suite with the exception class name on failure.
"""

import os
import tempfile
import time
from typing import Any, Callable, Dict, List

import numpy as np

from src.basis_store import (
    build_reference_basis, load_basis, reconstruct_left_factors, recombine_principal, save_basis, split,
)
from src.cache_engine import StrategyConfig, make_schedule, run_cached, run_cached_closed_loop
from src.error_handler import BasisError, setup_logger
from src.file_formats import read_bytes
from src.forecaster import EmaState, ema_update
from src.linalg import frobenius_inner, frobenius_norm, thin_svd, truncate
from src.metrics import similarity
from src.trajectory_lab import DenoiserConfig, SynthConfig, ToyDenoiser, synth_generate

logger = setup_logger('svdcache.selftest')

SEEDS = range(5)


def check_eckart_young() -> None:
    for seed in SEEDS:
        F = np.random.default_rng(seed).standard_normal((16, 8))
        factors = thin_svd(F)
        total = frobenius_norm(F) ** 2
        for k in range(1, factors.r + 1):
            tail = float(np.sum(factors.sigma[k:] ** 2))
            np.testing.assert_allclose(frobenius_norm(F - truncate(factors, k)) ** 2, tail, rtol=0.0,
                                       atol=1e-8 * total, err_msg=f"seed {seed} k {k}: tail energy")


def check_split_exactness() -> None:
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        F, other = rng.standard_normal((12, 10)), rng.standard_normal((12, 10))
        basis = build_reference_basis(other, 0.85, 0, 0, 'selftest')
        norm = frobenius_norm(F)
        for k in range(1, basis.r + 1):
            parts = split(F, basis, k)
            np.testing.assert_allclose(parts.recombine(), F, rtol=0.0, atol=1e-10 * norm,
                                       err_msg=f"seed {seed} k {k}: parts do not recombine")
            np.testing.assert_allclose(frobenius_inner(parts.principal, parts.residual), 0.0, rtol=0.0,
                                       atol=1e-8 * norm ** 2, err_msg=f"seed {seed} k {k}: parts not orthogonal")


def check_sigma_cancellation() -> None:
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        basis = build_reference_basis(rng.standard_normal((12, 8)), 0.85, 0, 0, 'selftest')
        F = rng.standard_normal((12, 8))
        via_factors = recombine_principal(reconstruct_left_factors(F, basis), basis)
        via_projection = split(F, basis).principal
        np.testing.assert_allclose(via_factors, via_projection, rtol=0.0,
                                   atol=1e-6 * frobenius_norm(via_projection),
                                   err_msg=f"seed {seed}: factor path differs")


def check_ema_closed_form() -> None:
    rng = np.random.default_rng(0)
    xs = rng.standard_normal((20, 3, 4))
    for beta in (0.5, 0.9, 0.99):
        state = EmaState(beta=beta)
        for t, x in enumerate(xs):
            state = ema_update(state, x, t)
        n = len(xs) - 1
        oracle = beta ** n * xs[0] + sum((1 - beta) * beta ** (n - j) * xs[j] for j in range(1, n + 1))
        np.testing.assert_allclose(state.state, oracle, rtol=0.0, atol=1e-12 * frobenius_norm(oracle),
                                   err_msg=f"beta {beta}: closed form")


def check_schedule_arithmetic() -> None:
    for N, computes, speedup in ((5, 10, 5.0), (6, 9, 50 / 9), (1, 50, 1.0), (7, 8, 6.25)):
        schedule = make_schedule(50, N)
        np.testing.assert_equal(schedule.compute_count, computes, err_msg=f"N={N}: compute count")
        np.testing.assert_equal(schedule.speedup, speedup, err_msg=f"N={N}: speedup")


def check_similarity() -> None:
    a = np.random.default_rng(1).standard_normal(32)
    np.testing.assert_allclose(similarity(a, a).product, 1.0, rtol=0.0, atol=1e-12)
    score = similarity(a, 2 * a)
    np.testing.assert_allclose([score.cosine, score.magnitude_ratio], [1.0, 0.5], rtol=0.0, atol=1e-12)
    np.testing.assert_allclose(similarity(a, -a).product, -1.0, rtol=0.0, atol=1e-12)


def make_checksum_check(inject_corruption: bool) -> Callable[[], None]:
    def check_basis_checksum() -> None:
        F = np.random.default_rng(3).standard_normal((10, 6))
        basis = build_reference_basis(F, 0.85, 1, 5, 'selftest')
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'basis.svdc')
            save_basis(basis, path)
            if inject_corruption:
                data = bytearray(read_bytes(path))
                data[len(data) // 2] ^= 0xFF
                with open(path, 'wb') as f:
                    f.write(bytes(data))
            loaded = load_basis(path)
            if not loaded.same_as(basis):
                raise BasisError("Basis changed across a save/load cycle", {'path': path})
            first = read_bytes(path)
            save_basis(loaded, path)
            if read_bytes(path) != first:
                raise BasisError("Re-saved basis is not byte-identical", {'path': path})
    return check_basis_checksum


def check_recompute_upper_bound() -> None:
    record = synth_generate(SynthConfig(N=12, D=10, T=12, blocks=2, planted_rank=3, seed=0))
    report = run_cached(record, make_schedule(12, 4), StrategyConfig('recompute', 'recompute'))
    np.testing.assert_array_equal(report.errors, 0.0, err_msg="recompute strategy produced nonzero error")
    np.testing.assert_equal(report.true_reads, {0: 3, 1: 3}, err_msg="unexpected read counts")


def check_closed_loop_identity() -> None:
    cfg = DenoiserConfig(N=6, D=8, L=2, T=8, seed=0)
    for N, strategy in ((1, StrategyConfig()), (4, StrategyConfig('recompute', 'recompute'))):
        report = run_cached_closed_loop(ToyDenoiser(cfg), make_schedule(8, N), strategy)
        np.testing.assert_equal(report.final_latent_rel_error, 0.0, err_msg=f"N={N}: final latent drifted")


def suites(inject_corruption: bool = False) -> Dict[str, Callable[[], None]]:
    return {
        'eckart_young': check_eckart_young,
        'split_exactness': check_split_exactness,
        'sigma_cancellation': check_sigma_cancellation,
        'ema_closed_form': check_ema_closed_form,
        'schedule_arithmetic': check_schedule_arithmetic,
        'similarity': check_similarity,
        'basis_checksum': make_checksum_check(inject_corruption),
        'recompute_upper_bound': check_recompute_upper_bound,
        'closed_loop_identity': check_closed_loop_identity,
    }


def run_selftest(inject_corruption: bool = False) -> List[Dict[str, Any]]:
    """
    Run every suite and collect results.

    Args:
        inject_corruption: Flip a byte in the checksum suite's basis fixture

    Returns:
        One dict per suite: suite, passed, error (class name or None), message, seconds
    """
    results = []
    for name, check in suites(inject_corruption).items():
        start = time.perf_counter()
        try:
            check()
            results.append({'suite': name, 'passed': True, 'error': None, 'message': ''})
        except Exception as e:
            logger.error(f"Suite {name} failed with {type(e).__name__}: {e}")
            results.append({'suite': name, 'passed': False, 'error': type(e).__name__, 'message': str(e)})
        results[-1]['seconds'] = round(time.perf_counter() - start, 3)
    return results
