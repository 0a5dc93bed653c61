"""
Unit tests for the synthetic generator, the toy denoiser and trajectory analysis.
"""

import os
import tempfile
import unittest

import numpy as np

from src.error_handler import TrajectoryError, ValidationError
from src.linalg import frobenius_norm
from src.trajectory_lab import (
    DenoiserConfig, SynthConfig, ToyDenoiser, TrajectoryRecord, forward_noise, linear_alpha_bar,
    path_ratio, pca_trace, planted_basis, smoothness_stats, synth_generate, toy_denoiser_run,
)


SMALL = dict(N=16, D=12, T=12, blocks=2, planted_rank=3)


class TestSynthGenerate(unittest.TestCase):

    def test_deterministic(self):
        a = synth_generate(SynthConfig(seed=3, **SMALL))
        b = synth_generate(SynthConfig(seed=3, **SMALL))
        c = synth_generate(SynthConfig(seed=4, **SMALL))
        self.assertEqual((a.L, a.T, a.shape), (2, 12, (16, 12)))
        for l in range(a.L):
            for t in range(a.T):
                np.testing.assert_array_equal(a.feature(l, t), b.feature(l, t))
        self.assertGreater(frobenius_norm(a.feature(0, 0) - c.feature(0, 0)), 0.0)
        self.assertEqual(a.source_id, 'synth-seed3')
        self.assertEqual(a.provenance['kind'], 'synth')

    def test_energy_split(self):
        for rho in (0.6, 0.9):
            cfg = SynthConfig(energy_split=rho, **SMALL)
            rec = synth_generate(cfg)
            for l in range(cfg.blocks):
                V_P, _ = planted_basis(cfg, l)
                fractions = []
                for F in rec.blocks[l]:
                    P = F @ V_P @ V_P.T
                    fractions.append(frobenius_norm(P) ** 2 / frobenius_norm(F) ** 2)
                self.assertAlmostEqual(float(np.mean(fractions)), rho, places=8)

    def test_prompts_share_planted_basis(self):
        cfg = SynthConfig(**SMALL)
        V_a, _ = planted_basis(cfg, 1)
        V_b, _ = planted_basis(SynthConfig(seed=9, **SMALL), 1)
        np.testing.assert_array_equal(V_a, V_b)
        V_c, perp = planted_basis(SynthConfig(basis_seed=2, **SMALL), 1)
        self.assertFalse(np.array_equal(V_a, V_c))
        np.testing.assert_allclose(V_c.T @ perp, 0.0, atol=1e-12)

    def test_static_dynamics_give_constant_trajectory(self):
        cfg = SynthConfig(drift_rate=0.0, oscillation_freq=0.0, jitter=0.0, residual_trend=0.0, **SMALL)
        rec = synth_generate(cfg)
        for t in range(1, rec.T):
            np.testing.assert_allclose(rec.feature(0, t), rec.feature(0, 0), atol=1e-14)

    def test_infeasible_configs(self):
        bad = [
            dict(SMALL, planted_rank=12),
            dict(SMALL, planted_rank=8),
            dict(SMALL, planted_rank=0),
            dict(SMALL, energy_split=1.0),
            dict(SMALL, energy_split=0.0),
            dict(SMALL, T=1),
            dict(SMALL, jitter=-0.1),
            dict(SMALL, spectrum_decay=0.0),
            dict(SMALL, N=0),
        ]
        for kwargs in bad:
            with self.assertRaises(TrajectoryError):
                synth_generate(SynthConfig(**kwargs))

    def test_literal_generator_has_smooth_principal(self):
        literal = SynthConfig(jitter=0.0, residual_trend=0.0, **SMALL)
        V_P, _ = planted_basis(literal, 0)
        for cfg, bounded in ((literal, True), (SynthConfig(**SMALL), False)):
            steps = synth_generate(cfg).blocks[0]
            moves = [frobenius_norm((F - steps[0]) @ V_P) for F in steps]
            self.assertEqual(max(moves) <= 2.0 * cfg.drift_amplitude + 1e-12, bounded)

    def test_parts_use_disjoint_token_directions(self):
        cfg = SynthConfig(seed=5, **SMALL)
        rec = synth_generate(cfg)
        V_P, _ = planted_basis(cfg, 0)
        for F in rec.blocks[0]:
            P = F @ V_P @ V_P.T
            np.testing.assert_allclose(P.T @ (F - P), 0.0, atol=1e-10)


class TestTrajectoryRecord(unittest.TestCase):

    def test_save_load(self):
        rec = synth_generate(SynthConfig(seed=1, **SMALL))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'traj.svct')
            rec.save(path)
            self.assertTrue(os.path.exists(path + '.json'))
            loaded = TrajectoryRecord.load(path)
            self.assertEqual(loaded.source_id, rec.source_id)
            for l in range(rec.L):
                for t in range(rec.T):
                    np.testing.assert_array_equal(loaded.feature(l, t), rec.feature(l, t))
            with self.assertRaises(FileNotFoundError):
                TrajectoryRecord.load(os.path.join(tmp, 'missing.svct'))

    def test_shape_checks(self):
        with self.assertRaises(TrajectoryError):
            TrajectoryRecord(blocks=[])
        with self.assertRaises(TrajectoryError):
            TrajectoryRecord(blocks=[[np.zeros((2, 2))], [np.zeros((2, 2)), np.zeros((2, 2))]])
        with self.assertRaises(TrajectoryError):
            TrajectoryRecord(blocks=[[np.zeros((2, 2)), np.zeros((2, 3))]])
        rec = TrajectoryRecord(blocks=[[np.zeros((2, 2))]])
        with self.assertRaises(ValidationError):
            rec.feature(1, 0)
        with self.assertRaises(ValidationError):
            rec.feature(0, 1)


class TestToyDenoiser(unittest.TestCase):

    def setUp(self):
        self.cfg = DenoiserConfig(N=8, D=8, L=2, T=10, seed=4)

    def test_schedule(self):
        ab = linear_alpha_bar(10)
        self.assertAlmostEqual(ab[0], 0.9999)
        self.assertAlmostEqual(ab[-1], 0.01)
        model = ToyDenoiser(self.cfg)
        self.assertTrue(np.all(np.diff(model.alpha) < 0))
        self.assertEqual(model.timestep(0), 10)
        self.assertEqual(model.timestep(9), 1)

    def test_runs_are_reproducible(self):
        rec_a, final_a = toy_denoiser_run(self.cfg)
        rec_b, final_b = toy_denoiser_run(self.cfg)
        np.testing.assert_array_equal(final_a, final_b)
        self.assertEqual((rec_a.L, rec_a.T, rec_a.shape), (2, 10, (8, 8)))
        for l in range(2):
            for t in range(10):
                np.testing.assert_array_equal(rec_a.feature(l, t), rec_b.feature(l, t))
        self.assertTrue(np.all(np.isfinite(final_a)))
        self.assertEqual(rec_a.source_id, 'denoiser-seed4')

    def test_eta_zero_is_noise_free(self):
        for sampler in ('ddpm', 'ddim'):
            cfg = DenoiserConfig(N=8, D=8, L=2, T=10, seed=4, eta=0.0, sampler=sampler)
            model = ToyDenoiser(cfg)
            _, final = model.run()
            model.noise = np.zeros_like(model.noise) + 5.0
            _, again = model.run()
            np.testing.assert_array_equal(final, again)
            self.assertTrue(np.all(np.isfinite(final)))

    def test_samplers_differ(self):
        _, ddpm = toy_denoiser_run(DenoiserConfig(N=8, D=8, L=2, T=10, eta=0.5))
        _, ddim = toy_denoiser_run(DenoiserConfig(N=8, D=8, L=2, T=10, eta=0.5, sampler='ddim'))
        self.assertGreater(frobenius_norm(ddpm - ddim), 0.0)

    def test_invalid_config(self):
        for kwargs in (dict(L=0), dict(eta=-1.0), dict(sampler='euler'),
                       dict(alpha_bar_start=0.5, alpha_bar_end=0.6), dict(alpha_bar_start=1.0),
                       dict(content_rank=0), dict(content_rank=5), dict(gate_jitter=-0.1), dict(input_gain=-1.0)):
            with self.assertRaises(ValidationError):
                ToyDenoiser(DenoiserConfig(N=4, D=4, T=5, **kwargs))

    def test_forward_noise(self):
        rng = np.random.default_rng(0)
        x0, eps = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        np.testing.assert_array_equal(forward_noise(x0, 1.0, eps), x0)
        np.testing.assert_allclose(forward_noise(x0, 0.25, eps), 0.5 * x0 + np.sqrt(0.75) * eps)
        with self.assertRaises(ValidationError):
            forward_noise(x0, 0.0, eps)


class TestAnalysis(unittest.TestCase):

    def test_pca_trace(self):
        rec = synth_generate(SynthConfig(**SMALL))
        coords = pca_trace(rec, 0)
        self.assertEqual(coords.shape, (12, 2))
        np.testing.assert_allclose(coords.mean(axis=0), 0.0, atol=1e-10)
        with self.assertRaises(TrajectoryError):
            pca_trace(synth_generate(SynthConfig(**dict(SMALL, T=2))), 0)
        with self.assertRaises(ValidationError):
            pca_trace(rec, 0, part='middle')

    def test_pca_trace_of_constant_trajectory(self):
        cfg = SynthConfig(drift_rate=0.0, oscillation_freq=0.0, jitter=0.0, residual_trend=0.0, **SMALL)
        np.testing.assert_allclose(pca_trace(synth_generate(cfg), 1), np.zeros((12, 2)), atol=1e-12)

    def test_path_ratio(self):
        self.assertEqual(path_ratio(np.zeros((4, 2))), 1.0)
        self.assertAlmostEqual(path_ratio(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])), 1.0)
        self.assertAlmostEqual(path_ratio(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])), 2.0 / np.sqrt(2.0))
        self.assertEqual(path_ratio(np.array([[0.0], [1.0], [0.0]])), float('inf'))

    def test_residual_is_less_smooth_than_principal(self):
        principal_change, residual_change = [], []
        for seed in range(10):
            stats = smoothness_stats(synth_generate(SynthConfig(seed=seed)), 0)
            self.assertEqual(set(stats), {'full', 'principal', 'residual'})
            self.assertGreater(stats['residual']['path_ratio'], stats['principal']['path_ratio'])
            principal_change.append(stats['principal']['mean_relative_change'])
            residual_change.append(stats['residual']['mean_relative_change'])
        self.assertLess(np.mean(principal_change), np.mean(residual_change))


if __name__ == "__main__":
    unittest.main()
