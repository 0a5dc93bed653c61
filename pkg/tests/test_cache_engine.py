"""
Unit tests for the cache engine: schedules, strategies, open- and closed-loop runs.
"""

import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from src.basis_store import BasisStore
from src.cache_engine import (
    REPORT_COLUMNS, BasisProvider, StrategyConfig, ablation_grid, flops_estimate, make_schedule,
    run_cached, run_cached_closed_loop,
)
from src.error_handler import EngineError, ValidationError
from src.trajectory_lab import DenoiserConfig, SynthConfig, ToyDenoiser, synth_generate


SMALL = dict(N=16, D=12, T=12, blocks=2, planted_rank=3)


def _mean_error(report):
    return float(np.mean(report.errors))


class TestSchedule(unittest.TestCase):

    def test_arithmetic(self):
        for T, N, count, speedup in ((50, 5, 10, 5.0), (50, 6, 9, 50 / 9), (50, 7, 8, 6.25), (50, 1, 50, 1.0)):
            schedule = make_schedule(T, N)
            self.assertEqual(schedule.compute_count, count)
            self.assertEqual(schedule.predicted_count, T - count)
            self.assertAlmostEqual(schedule.speedup, speedup)
        schedule = make_schedule(10, 4)
        self.assertEqual(schedule.compute_steps, (0, 4, 8))
        self.assertEqual([schedule.predecessor(s) for s in (0, 3, 4, 9)], [0, 0, 4, 8])
        self.assertTrue(schedule.is_compute(8))
        self.assertFalse(schedule.is_compute(9))
        self.assertEqual(make_schedule(5, 5).compute_steps, (0,))

    def test_invalid(self):
        for T, N in ((0, 1), (10, 0), (10, 11), (10, 2.5), (True, 1)):
            with self.assertRaises(ValidationError):
                make_schedule(T, N)

    def test_flops(self):
        est = flops_estimate(50, 5, full_flops=2.0, uncached_fraction=0.2)
        self.assertAlmostEqual(est['block_speedup'], 5.0)
        self.assertAlmostEqual(est['total_flops'], 2.0 * (0.8 * 10 + 0.2 * 50))
        self.assertAlmostEqual(est['end_to_end_speedup'], 50 / 18)
        self.assertAlmostEqual(flops_estimate(50, 5)['end_to_end_speedup'], 5.0)
        with self.assertRaises(ValidationError):
            flops_estimate(50, 5, uncached_fraction=1.5)


class TestStrategyConfig(unittest.TestCase):

    def test_labels(self):
        self.assertEqual(StrategyConfig().label, 'ema+reuse')
        s = StrategyConfig.from_label('taylor(2) + reuse', tau=0.7)
        self.assertEqual((s.principal_rule, s.residual_rule, s.tau), ('taylor(2)', 'reuse', 0.7))
        self.assertEqual(s.label, 'taylor(2)+reuse')
        full = StrategyConfig.from_label('full:ema')
        self.assertFalse(full.decompose)
        self.assertEqual(full.label, 'full:ema')
        self.assertEqual(full.to_dict()['label'], 'full:ema')

    def test_invalid(self):
        with self.assertRaises(ValidationError):
            StrategyConfig.from_label('ema')
        with self.assertRaises(ValidationError):
            StrategyConfig(principal_rule='median')
        with self.assertRaises(ValidationError):
            StrategyConfig(tau=0.0)
        with self.assertRaises(ValidationError):
            StrategyConfig(beta=1.0)
        with self.assertRaises(ValidationError):
            StrategyConfig(basis_mode='sometimes')


class TestRunCached(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.traj = synth_generate(SynthConfig(seed=2, **SMALL))
        cls.schedule = make_schedule(12, 3)

    def test_row_layout_and_reads(self):
        report = run_cached(self.traj, self.schedule, StrategyConfig())
        self.assertEqual(len(report.rows), 2 * 12)
        self.assertEqual([(r.block, r.step) for r in report.rows[:3]], [(0, 0), (0, 1), (0, 2)])
        self.assertEqual(report.true_reads, {0: 4, 1: 4})
        self.assertEqual(len(report.errors), 2 * 8)
        for row in report.rows:
            if row.is_compute:
                self.assertEqual((row.rel_error, row.similarity), (0.0, 1.0))
            self.assertTrue(0.0 <= row.principal_energy_fraction <= 1.0)
        summary = report.summary()
        self.assertEqual(summary['speedup'], 3.0)
        self.assertGreater(summary['mean_rel_error'], 0.0)

    def test_recompute_is_exact(self):
        for label in ('recompute+recompute', 'full:recompute'):
            report = run_cached(self.traj, self.schedule, StrategyConfig.from_label(label))
            self.assertTrue(all(e == 0.0 for e in report.errors))

    def test_recompute_residual_bounds_reuse(self):
        reuse = run_cached(self.traj, self.schedule, StrategyConfig.from_label('reuse+reuse'))
        bound = run_cached(self.traj, self.schedule, StrategyConfig.from_label('reuse+recompute'))
        for a, b in zip(bound.errors, reuse.errors):
            self.assertLessEqual(a, b + 1e-12)

    def test_split_reuse_equals_full_reuse(self):
        split_run = run_cached(self.traj, self.schedule, StrategyConfig.from_label('reuse+reuse'))
        full_run = run_cached(self.traj, self.schedule, StrategyConfig.from_label('full:reuse'))
        np.testing.assert_allclose(split_run.errors, full_run.errors, atol=1e-12)

    def test_interval_one_has_no_predictions(self):
        report = run_cached(self.traj, make_schedule(12, 1), StrategyConfig())
        self.assertEqual(report.errors, [])
        self.assertEqual(report.summary()['mean_rel_error'], 0.0)
        self.assertEqual(report.true_reads, {0: 12, 1: 12})

    def test_schedule_mismatch(self):
        with self.assertRaises(ValidationError):
            run_cached(self.traj, make_schedule(10, 2), StrategyConfig())

    def test_missing_basis(self):
        with tempfile.TemporaryDirectory() as tmp:
            store = BasisStore(os.path.join(tmp, 'bases'))
            with self.assertRaises(EngineError):
                run_cached(self.traj, self.schedule, StrategyConfig(), basis_source=store)

    def test_global_basis_from_foreign_reference(self):
        reference = synth_generate(SynthConfig(seed=7, **SMALL))
        provider = BasisProvider(reference, 0.85, 'global')
        self.assertIs(provider.basis_for(1, 0), provider.basis_for(1, 9))
        report = run_cached(self.traj, self.schedule, StrategyConfig(basis_mode='global'), basis_source=reference)
        self.assertEqual(len(report.errors), 16)
        self.assertEqual(report.source_id, 'synth-seed2')

    def test_report_files(self):
        report = run_cached(self.traj, self.schedule, StrategyConfig())
        with tempfile.TemporaryDirectory() as tmp:
            report.to_csv(os.path.join(tmp, 'r.csv'))
            report.to_json(os.path.join(tmp, 'r.json'))
            frame = pd.read_csv(os.path.join(tmp, 'r.csv'))
            self.assertEqual(list(frame.columns), REPORT_COLUMNS)
            self.assertEqual(len(frame), 24)
            with open(os.path.join(tmp, 'r.json')) as f:
                text = f.read()
            self.assertIn('"ema+reuse"', text)
            self.assertTrue(text.endswith('\n'))


class TestAblationGrid(unittest.TestCase):

    def test_cells_match_single_runs(self):
        traj = synth_generate(SynthConfig(seed=1, **SMALL))
        schedule = make_schedule(12, 4)
        strategies = [StrategyConfig.from_label('ema+reuse'), StrategyConfig.from_label('reuse+reuse')]
        serial = ablation_grid(traj, schedule, [0.7, 0.9], strategies)
        parallel = ablation_grid(traj, schedule, [0.7, 0.9], strategies, jobs=2)
        self.assertEqual([(r.strategy.label, r.strategy.tau) for r in serial],
                         [('ema+reuse', 0.7), ('ema+reuse', 0.9), ('reuse+reuse', 0.7), ('reuse+reuse', 0.9)])
        for a, b in zip(serial, parallel):
            self.assertEqual(a.errors, b.errors)
        single = run_cached(traj, schedule, StrategyConfig(tau=0.9))
        self.assertEqual(serial[1].errors, single.errors)

    def test_empty_lists(self):
        traj = synth_generate(SynthConfig(**SMALL))
        with self.assertRaises(ValidationError):
            ablation_grid(traj, make_schedule(12, 3), [], [StrategyConfig()])


class TestDefaultSuite(unittest.TestCase):
    """Orderings on the default planted trajectories."""

    SEEDS = tuple(range(10))

    @classmethod
    def setUpClass(cls):
        cls.trajs = [synth_generate(SynthConfig(seed=seed)) for seed in cls.SEEDS]
        cls.schedule = make_schedule(50, 5)

    def _errors(self, label, tau=0.85, N=None):
        schedule = self.schedule if N is None else make_schedule(50, N)
        strategy = StrategyConfig.from_label(label, tau=tau)
        return [run_cached(t, schedule, strategy).summary()['mean_rel_error'] for t in self.trajs]

    def _error(self, label, tau=0.85, N=None):
        return float(np.mean(self._errors(label, tau, N)))

    def test_ema_principal_reuse_residual_wins_per_seed(self):
        best = self._errors('ema+reuse')
        reuse = self._errors('reuse+reuse')
        ema = self._errors('ema+ema')
        wins = sum(b < 0.95 * r and b < 0.95 * e for b, r, e in zip(best, reuse, ema))
        self.assertGreaterEqual(wins, 9)

    def test_threshold_has_interior_optimum(self):
        middle = self._error('ema+reuse', tau=0.85)
        self.assertLess(middle, self._error('ema+reuse', tau=0.5))
        self.assertLess(middle, self._error('ema+reuse', tau=0.99))

    def test_error_grows_with_interval(self):
        errors = [self._error('ema+reuse', N=N) for N in (1, 2, 4, 5, 6, 7, 8)]
        self.assertEqual(errors[0], 0.0)
        self.assertEqual(errors, sorted(errors))


class TestClosedLoop(unittest.TestCase):

    def setUp(self):
        self.denoiser = ToyDenoiser(DenoiserConfig(N=8, D=8, L=2, T=10, seed=3))

    def test_recompute_reproduces_reference(self):
        for label in ('recompute+recompute', 'full:recompute'):
            report = run_cached_closed_loop(self.denoiser, make_schedule(10, 3), StrategyConfig.from_label(label))
            self.assertEqual(report.final_latent_rel_error, 0.0)
            self.assertEqual(report.true_reads, {0: 4, 1: 4})

    def test_interval_one_reproduces_reference(self):
        report = run_cached_closed_loop(self.denoiser, make_schedule(10, 1), StrategyConfig())
        self.assertEqual(report.final_latent_rel_error, 0.0)

    def test_caching_perturbs_final_latent(self):
        report = run_cached_closed_loop(self.denoiser, make_schedule(10, 3), StrategyConfig())
        self.assertGreater(report.final_latent_rel_error, 0.0)
        self.assertEqual(len(report.rows), 20)
        self.assertIn('final_latent_rel_error', report.summary())

    def test_schedule_mismatch(self):
        with self.assertRaises(ValidationError):
            run_cached_closed_loop(self.denoiser, make_schedule(12, 3), StrategyConfig())


class TestClosedLoopOrdering(unittest.TestCase):
    """Final-latent ordering on the default toy denoiser with a one-time basis."""

    @classmethod
    def setUpClass(cls):
        cls.denoiser = ToyDenoiser(DenoiserConfig(seed=0))
        cls.schedule = make_schedule(50, 5)

    def test_ema_reuse_beats_reuse_reuse(self):
        ema = run_cached_closed_loop(self.denoiser, self.schedule, StrategyConfig(basis_mode='global'))
        reuse = run_cached_closed_loop(self.denoiser, self.schedule,
                                       StrategyConfig.from_label('reuse+reuse', basis_mode='global'))
        self.assertEqual(ema.strategy.label, 'ema+reuse')
        self.assertLess(ema.final_latent_rel_error, reuse.final_latent_rel_error)

    def test_block_outputs_are_temporally_coherent(self):
        blocks, _ = self.denoiser.run()
        cosines = []
        for steps in blocks:
            for prev, cur in zip(steps[:-1], steps[1:]):
                cosines.append(np.vdot(prev, cur) / (np.linalg.norm(prev) * np.linalg.norm(cur)))
        self.assertGreater(float(np.mean(cosines)), 0.5)

    def test_readout_excludes_input_latent(self):
        x = self.denoiser.x_T
        outputs = self.denoiser.block_outputs(x, 0)
        self.assertEqual(len(outputs), 4)
        # Final step reads the clean prediction straight through.
        last = self.denoiser.T - 1
        eps = self.denoiser.eps_from_output(outputs[-1], x, last)
        np.testing.assert_allclose(self.denoiser.update(x, eps, last), outputs[-1], atol=1e-9)


if __name__ == "__main__":
    unittest.main()
