"""
Command implementations behind main.py.

Each command takes a validated Config and an output directory, writes its
artifacts atomically and returns what it wrote so callers and tests can
inspect it. Commands are deterministic given config and seeds.
"""

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.basis_store import BasisStore, basis_similarity, build_reference_basis
from src.cache_engine import (
    CacheSchedule, RunReport, StrategyConfig, ablation_grid, make_schedule,
    run_cached, run_cached_closed_loop,
)
from src.config import Config
from src.error_handler import EngineError, TrajectoryError, safe_execute, setup_logger
from src.file_formats import GLOBAL_STEP_ID, atomic_write_bytes, atomic_write_json
from src.selftest import run_selftest
from src.trajectory_lab import (
    ToyDenoiser, TrajectoryRecord, pca_trace, smoothness_stats, synth_generate, toy_denoiser_run,
)

logger = setup_logger('svdcache.harness')


def write_csv(frame: pd.DataFrame, path: str) -> None:
    text = frame.to_csv(index=False, float_format='%.12g', lineterminator='\n')
    atomic_write_bytes(path, text.encode('utf-8'))


def load_trajectory(config: Config, seed: int) -> TrajectoryRecord:
    """Ground-truth trajectory for one seed; file sources ignore the seed."""
    source = config.get_source()
    if source['kind'] == 'synth':
        return synth_generate(config.get_synth_config(seed))
    if source['kind'] == 'toy_denoiser':
        record, _ = toy_denoiser_run(config.get_denoiser_config(seed))
        return record
    return TrajectoryRecord.load(source['path'])


def resolve_basis_source(config: Config, trajectory: TrajectoryRecord) -> Union[BasisStore, TrajectoryRecord]:
    """
    Stored bases if ``basis.dir`` is set, else a reference trajectory for on-the-fly builds.

    The reference is ``basis.reference_seed``'s trajectory when set, otherwise
    the trajectory being evaluated.

    Raises:
        EngineError: If ``basis.dir`` is set but does not exist
    """
    basis_dir = config.get_basis_dir()
    if basis_dir:
        if not os.path.isdir(basis_dir):
            raise EngineError(f"Basis directory not found: {basis_dir}; run decompose first",
                              {'basis_dir': basis_dir})
        return BasisStore(basis_dir)
    reference_seed = config.get_reference_seed()
    if reference_seed is not None:
        return load_trajectory(config, reference_seed)
    return trajectory


def _schedule_for(config: Config, T: int) -> CacheSchedule:
    return make_schedule(T, config.get_schedule_params()['N'])


def cmd_decompose(config: Config, out_dir: str) -> List[str]:
    """
    Run the one-time SVD over a reference trajectory's compute steps and persist the bases.

    Returns:
        Paths of the written basis files followed by the manifest path
    """
    seed = config.get_reference_seed()
    seed = config.get_seeds()[0] if seed is None else seed
    reference = load_trajectory(config, seed)
    store = BasisStore(config.get_basis_dir() or os.path.join(out_dir, 'bases'))
    strategy = config.get_strategy()
    schedule = _schedule_for(config, reference.T)
    steps = [GLOBAL_STEP_ID] if strategy.basis_mode == 'global' else list(schedule.compute_steps)

    written = []
    for block, step in itertools.product(range(reference.L), steps):
        F = reference.feature(block, 0 if step == GLOBAL_STEP_ID else step)
        basis = build_reference_basis(F, strategy.tau, block, step, reference.source_id)
        written.append(store.put(basis))
    manifest = store.write_manifest({'mode': strategy.basis_mode, 'tau': strategy.tau,
                                     'source_id': reference.source_id})
    logger.info(f"Wrote {len(written)} bases from {reference.source_id} to {store.root}")
    return written + [manifest]


def cmd_synth(config: Config, out_dir: str) -> List[str]:
    """Write one ``SVCT`` trajectory file per seed."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for seed in config.get_seeds():
        record = load_trajectory(config, seed)
        path = os.path.join(out_dir, f"trajectory_seed{seed}.svct")
        record.save(path)
        paths.append(path)
    return paths


def _run_strategy(config: Config, seed: int, strategy: StrategyConfig, N: int) -> RunReport:
    if config.get_source()['kind'] == 'toy_denoiser':
        denoiser = ToyDenoiser(config.get_denoiser_config(seed))
        basis_source = None
        if config.get_basis_dir() or config.get_reference_seed() is not None:
            basis_source = resolve_basis_source(config, None)
        return run_cached_closed_loop(denoiser, make_schedule(denoiser.T, N), strategy, basis_source)
    trajectory = load_trajectory(config, seed)
    return run_cached(trajectory, make_schedule(trajectory.T, N), strategy,
                      resolve_basis_source(config, trajectory))


def cmd_run(config: Config, out_dir: str) -> List[Dict[str, Any]]:
    """
    Run the configured strategy on every seed and write per-seed JSON and CSV reports.

    Toy-denoiser sources run closed loop; other sources run against the
    recorded trajectory.

    Returns:
        Per-seed summaries (also written to ``summary.csv``)
    """
    os.makedirs(out_dir, exist_ok=True)
    strategy = config.get_strategy()
    N = config.get_schedule_params()['N']
    summaries = []
    for seed in tqdm(config.get_seeds(), desc="run", disable=len(config.get_seeds()) < 2):
        report = _run_strategy(config, seed, strategy, N)
        report.to_json(os.path.join(out_dir, f"report_seed{seed}.json"))
        report.to_csv(os.path.join(out_dir, f"report_seed{seed}.csv"))
        summaries.append({'seed': seed, 'strategy': strategy.label, **report.summary()})
    write_csv(pd.DataFrame(summaries), os.path.join(out_dir, 'summary.csv'))
    logger.info(f"Run {strategy.label} N={N} finished for {len(summaries)} seeds; reports in {out_dir}")
    return summaries


def _grid_reports(config: Config, seed: int, strategies: List[StrategyConfig], N: int) -> List[RunReport]:
    jobs = config.get_jobs()
    if config.get_source()['kind'] == 'toy_denoiser':
        if jobs <= 1:
            return [_run_strategy(config, seed, s, N) for s in strategies]
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            return list(executor.map(lambda s: _run_strategy(config, seed, s, N), strategies))
    trajectory = load_trajectory(config, seed)
    # Every listed strategy shares the main strategy's tau, so one grid row covers them.
    return ablation_grid(trajectory, make_schedule(trajectory.T, N), [config.get_strategy().tau], strategies,
                         resolve_basis_source(config, trajectory), jobs=jobs)


def cmd_compare(config: Config, out_dir: str) -> pd.DataFrame:
    """
    Rank the configured strategies (and intervals) by mean relative error.

    Writes ``comparison.csv`` sorted by interval then mean error ascending,
    and ``tau_sweep.csv`` for the main strategy over ``tau_list``.

    Returns:
        The comparison table
    """
    os.makedirs(out_dir, exist_ok=True)
    strategies = config.get_strategy_list()
    intervals = config.get_interval_list() or [config.get_schedule_params()['N']]
    records = []
    for seed in tqdm(config.get_seeds(), desc="compare", disable=len(config.get_seeds()) < 2):
        for N in intervals:
            for strategy, report in zip(strategies, _grid_reports(config, seed, strategies, N)):
                records.append({'seed': seed, 'interval': N, 'strategy': strategy.label, **report.summary()})
    per_seed = pd.DataFrame(records)

    aggregations = {'mean_rel_error': 'mean', 'max_rel_error': 'max', 'mean_similarity': 'mean',
                    'compute_count': 'first', 'speedup': 'first'}
    if 'final_latent_rel_error' in per_seed:
        aggregations['final_latent_rel_error'] = 'mean'
    table = (per_seed.groupby(['interval', 'strategy'], sort=False).agg(aggregations).reset_index()
             .sort_values(['interval', 'mean_rel_error'], kind='mergesort').reset_index(drop=True))
    table.insert(2, 'rank', table.groupby('interval').cumcount() + 1)
    write_csv(table, os.path.join(out_dir, 'comparison.csv'))
    write_csv(per_seed, os.path.join(out_dir, 'comparison_per_seed.csv'))

    if config.get_source()['kind'] != 'toy_denoiser':
        write_csv(tau_sweep(config), os.path.join(out_dir, 'tau_sweep.csv'))
    logger.info(f"Compared {len(strategies)} strategies over intervals {intervals}; best "
                f"{table.iloc[0]['strategy']} at N={table.iloc[0]['interval']}")
    return table


def tau_sweep(config: Config) -> pd.DataFrame:
    """Seed-averaged mean error of the main strategy for each tau in ``tau_list``."""
    strategy = config.get_strategy()
    taus = config.get_tau_list()
    N = config.get_schedule_params()['N']
    rows = []
    for seed in config.get_seeds():
        trajectory = load_trajectory(config, seed)
        reports = ablation_grid(trajectory, make_schedule(trajectory.T, N), taus, [strategy],
                                resolve_basis_source(config, trajectory), jobs=config.get_jobs())
        for tau, report in zip(taus, reports):
            summary = report.summary()
            rows.append({'tau': tau, 'seed': seed, 'mean_rel_error': summary['mean_rel_error'],
                         'mean_similarity': summary['mean_similarity']})
    frame = pd.DataFrame(rows)
    return frame.groupby('tau', sort=True)[['mean_rel_error', 'mean_similarity']].mean().reset_index()


def cmd_analyze(config: Config, out_dir: str) -> Dict[str, str]:
    """
    Emit plot-ready CSVs: PCA traces, step-0 basis similarity across seeds and smoothness stats.

    Similarity needs at least two seeds and is skipped otherwise.

    Returns:
        Mapping from artifact name to path
    """
    os.makedirs(out_dir, exist_ok=True)
    tau = config.get_strategy().tau
    seeds = config.get_seeds()
    paths: Dict[str, str] = {}
    trace_rows, smooth_rows, step0 = [], [], {}

    for seed in seeds:
        record = load_trajectory(config, seed)
        for block in range(record.L):
            basis = build_reference_basis(record.feature(block, 0), tau, block, 0, record.source_id)
            step0[(seed, block)] = basis
            if record.T >= 3:
                for part in ('full', 'principal', 'residual'):
                    coords = pca_trace(record, block, basis, part=part)
                    for step, (pc1, pc2) in enumerate(coords):
                        trace_rows.append({'seed': seed, 'block': block, 'part': part, 'step': step,
                                           'pc1': pc1, 'pc2': pc2})
            stats_by_part = safe_execute(smoothness_stats, f"Smoothness stats failed for seed {seed} block {block}",
                                         logger, error_class=TrajectoryError, raise_error=True,
                                         rec=record, block=block, basis=basis)
            for part, stats in stats_by_part.items():
                smooth_rows.append({'seed': seed, 'block': block, 'part': part, **stats})

    if trace_rows:
        paths['pca_trace'] = os.path.join(out_dir, 'pca_trace.csv')
        write_csv(pd.DataFrame(trace_rows), paths['pca_trace'])
    else:
        logger.warning("Trajectories have fewer than 3 steps; PCA traces skipped")
    paths['smoothness'] = os.path.join(out_dir, 'smoothness.csv')
    write_csv(pd.DataFrame(smooth_rows), paths['smoothness'])

    if len(seeds) >= 2:
        sim_rows = []
        for (a, b) in itertools.combinations(seeds, 2):
            for block in sorted({blk for (_, blk) in step0}):
                sim = basis_similarity(step0[(a, block)], step0[(b, block)])
                sim_rows.append({'seed_a': a, 'seed_b': b, 'block': block, 'summary': sim.summary,
                                 'sigma_similarity': sim.sigma_similarity,
                                 'mean_per_vector': float(np.mean(sim.per_vector))})
        paths['basis_similarity'] = os.path.join(out_dir, 'basis_similarity.csv')
        write_csv(pd.DataFrame(sim_rows), paths['basis_similarity'])
    else:
        logger.warning("Basis similarity needs at least two seeds; skipped")

    atomic_write_json(os.path.join(out_dir, 'analysis_manifest.json'),
                      {'seeds': seeds, 'tau': tau, 'artifacts': sorted(paths)})
    logger.info(f"Analysis artifacts written to {out_dir}: {', '.join(sorted(paths))}")
    return paths


def cmd_selftest(inject_corruption: bool = False) -> List[Dict[str, Any]]:
    """Run the invariant suites; one result dict per suite."""
    results = run_selftest(inject_corruption)
    failed = [r['suite'] for r in results if not r['passed']]
    if failed:
        logger.error(f"Selftest failed suites: {', '.join(failed)}")
    else:
        logger.info(f"Selftest passed {len(results)} suites")
    return results
