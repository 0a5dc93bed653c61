"""
Tests for the command layer and the main.py entry point.
"""

import filecmp
import json
import os
import tempfile
import unittest
from contextlib import redirect_stdout
from io import StringIO
from unittest.mock import patch

import pandas as pd

from main import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from src.config import Config
from src.error_handler import EngineError
from src.harness import cmd_analyze, cmd_compare, cmd_decompose, cmd_run, cmd_selftest, cmd_synth, tau_sweep
from src.linalg import truncate
from src.trajectory_lab import TrajectoryRecord

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TEST_CONFIG = os.path.join(ROOT, 'configs', 'test_config.json')


class HarnessTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = self.tmp.name
        self.config = Config.from_file(TEST_CONFIG)

    def tearDown(self):
        self.tmp.cleanup()


class TestDecompose(HarnessTestCase):

    def test_per_step_bases(self):
        paths = cmd_decompose(self.config, self.out)
        # L = 2 blocks, ceil(10 / 3) = 4 compute steps
        self.assertEqual(len(paths), 2 * 4 + 1)
        self.assertTrue(paths[-1].endswith('manifest.json'))
        self.assertTrue(all(os.path.exists(p) for p in paths))
        with open(paths[-1]) as f:
            manifest = json.load(f)
        self.assertEqual(manifest['count'], 8)
        self.assertEqual(manifest['mode'], 'per-step')

    def test_global_bases(self):
        config = self.config.apply_overrides(["basis.mode=global"])
        paths = cmd_decompose(config, self.out)
        self.assertEqual(len(paths), 2 + 1)
        self.assertTrue(paths[0].endswith('basis_b0_sglobal.svdc'))

    def test_byte_deterministic(self):
        first = cmd_decompose(self.config, os.path.join(self.out, 'a'))
        second = cmd_decompose(self.config, os.path.join(self.out, 'b'))
        for a, b in zip(first, second):
            self.assertTrue(filecmp.cmp(a, b, shallow=False), f"{a} differs from {b}")

    def test_stored_bases_drive_run(self):
        basis_dir = os.path.join(self.out, 'stored')
        config = self.config.apply_overrides([f"basis.dir={basis_dir}"]).with_seeds([0])
        cmd_decompose(config, self.out)
        stored = cmd_run(config, os.path.join(self.out, 'stored_run'))
        built = cmd_run(self.config.with_seeds([0]), os.path.join(self.out, "built_run"))
        for a, b in zip(stored, built):
            self.assertAlmostEqual(a['mean_rel_error'], b['mean_rel_error'], places=12)

    def test_missing_basis_dir(self):
        config = self.config.apply_overrides([f"basis.dir={os.path.join(self.out, 'absent')}"])
        with self.assertRaises(EngineError):
            cmd_run(config, self.out)


class TestSynthAndRun(HarnessTestCase):

    def test_synth_files_round_trip_through_run(self):
        paths = cmd_synth(self.config, self.out)
        self.assertEqual([os.path.basename(p) for p in paths], ['trajectory_seed0.svct', 'trajectory_seed1.svct'])
        record = TrajectoryRecord.load(paths[0])
        self.assertEqual((record.L, record.T, record.shape), (2, 10, (16, 12)))

        from_file = self.config.apply_overrides(["source.kind=file", f"source.path={paths[0]}", "seeds=[0]"])
        generated = self.config.with_seeds([0])
        a = cmd_run(from_file, os.path.join(self.out, 'file'))
        b = cmd_run(generated, os.path.join(self.out, 'gen'))
        self.assertEqual(a[0]['mean_rel_error'], b[0]['mean_rel_error'])

    def test_run_outputs_are_deterministic(self):
        first = os.path.join(self.out, 'first')
        second = os.path.join(self.out, 'second')
        summaries = cmd_run(self.config, first)
        cmd_run(self.config, second)
        self.assertEqual([s['seed'] for s in summaries], [0, 1])
        for name in ('report_seed0.json', 'report_seed0.csv', 'report_seed1.csv', 'summary.csv'):
            self.assertTrue(filecmp.cmp(os.path.join(first, name), os.path.join(second, name), shallow=False))
        frame = pd.read_csv(os.path.join(first, 'report_seed1.csv'))
        self.assertEqual(len(frame), 2 * 10)

    def test_toy_denoiser_runs_closed_loop(self):
        config = self.config.apply_overrides(["source.kind=toy_denoiser"]).with_seeds([0])
        summaries = cmd_run(config, self.out)
        self.assertIn('final_latent_rel_error', summaries[0])
        self.assertGreaterEqual(summaries[0]['final_latent_rel_error'], 0.0)


class TestCompare(HarnessTestCase):

    def test_ranking(self):
        table = cmd_compare(self.config, self.out)
        self.assertEqual(set(table['strategy']), {'ema+reuse', 'reuse+reuse'})
        self.assertEqual(list(table['rank']), [1, 2])
        self.assertEqual(list(table['mean_rel_error']), sorted(table['mean_rel_error']))
        self.assertTrue((table['speedup'] == 2.5).all())
        for name in ('comparison.csv', 'comparison_per_seed.csv', 'tau_sweep.csv'):
            self.assertTrue(os.path.exists(os.path.join(self.out, name)))
        per_seed = pd.read_csv(os.path.join(self.out, 'comparison_per_seed.csv'))
        self.assertEqual(len(per_seed), 2 * 2)

    def test_interval_list(self):
        config = self.config.apply_overrides(["interval_list=[2, 5]"])
        table = cmd_compare(config, self.out)
        self.assertEqual(list(table['interval']), [2, 2, 5, 5])
        self.assertEqual(list(table['rank']), [1, 2, 1, 2])
        self.assertEqual(list(table['speedup']), [2.0, 2.0, 5.0, 5.0])

    def test_tau_sweep(self):
        frame = tau_sweep(self.config)
        self.assertEqual(list(frame['tau']), [0.7, 0.85])
        self.assertTrue((frame['mean_rel_error'] > 0).all())

    def test_parallel_matches_serial(self):
        serial = cmd_compare(self.config, os.path.join(self.out, 'serial'))
        parallel = cmd_compare(self.config.apply_overrides(["jobs=2"]), os.path.join(self.out, 'parallel'))
        pd.testing.assert_frame_equal(serial, parallel)

    def test_toy_denoiser_compare(self):
        config = self.config.apply_overrides(["source.kind=toy_denoiser"]).with_seeds([0])
        table = cmd_compare(config, self.out)
        self.assertIn('final_latent_rel_error', table.columns)
        self.assertFalse(os.path.exists(os.path.join(self.out, 'tau_sweep.csv')))


class TestAnalyze(HarnessTestCase):

    def test_outputs(self):
        paths = cmd_analyze(self.config, self.out)
        self.assertEqual(set(paths), {'pca_trace', 'smoothness', 'basis_similarity'})
        trace = pd.read_csv(paths['pca_trace'])
        self.assertEqual(len(trace), 2 * 2 * 3 * 10)
        smooth = pd.read_csv(paths['smoothness'])
        self.assertEqual(len(smooth), 2 * 2 * 3)
        sims = pd.read_csv(paths['basis_similarity'])
        self.assertEqual(len(sims), 2)
        self.assertTrue(((sims['summary'] >= 0) & (sims['summary'] <= 1)).all())
        with open(os.path.join(self.out, 'analysis_manifest.json')) as f:
            self.assertEqual(json.load(f)['artifacts'], sorted(paths))

    def test_single_seed_skips_similarity(self):
        paths = cmd_analyze(self.config.with_seeds([3]), self.out)
        self.assertNotIn('basis_similarity', paths)

    def test_prompts_sharing_a_basis_seed_are_similar(self):
        config = Config({"synth": {"jitter": 0.1}, "seeds": [0, 1, 2, 3, 4]})
        paths = cmd_analyze(config, self.out)
        sims = pd.read_csv(paths['basis_similarity'])
        self.assertEqual(len(sims), 10 * 4)
        self.assertTrue((sims['summary'] > 0.8).all())


class TestSelftest(unittest.TestCase):

    def test_all_suites_pass(self):
        results = cmd_selftest()
        self.assertEqual(len(results), 9)
        self.assertTrue(all(r['passed'] for r in results), [r for r in results if not r['passed']])

    def test_injected_corruption(self):
        results = {r['suite']: r for r in cmd_selftest(inject_corruption=True)}
        self.assertFalse(results['basis_checksum']['passed'])
        self.assertEqual(results['basis_checksum']['error'], 'ChecksumError')
        self.assertTrue(results['eckart_young']['passed'])

    def test_failing_check_is_reported(self):
        with patch('src.selftest.truncate', side_effect=lambda factors, k: 2.0 * truncate(factors, k)):
            results = {r['suite']: r for r in cmd_selftest()}
        self.assertFalse(results['eckart_young']['passed'])
        self.assertEqual(results['eckart_young']['error'], 'AssertionError')
        self.assertTrue(results['split_exactness']['passed'])


class TestMain(unittest.TestCase):

    def _main(self, argv):
        with redirect_stdout(StringIO()):
            return main(argv)

    def test_exit_codes(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(self._main(["run", "--config", TEST_CONFIG, "--out", tmp]), EXIT_OK)
            self.assertTrue(os.path.exists(os.path.join(tmp, 'summary.csv')))
            self.assertEqual(self._main(["run", "--config", os.path.join(tmp, 'missing.json')]), EXIT_VALIDATION)
            self.assertEqual(self._main(["run", "--config", TEST_CONFIG, "--set", "schedule.N=0", "--out", tmp]),
                             EXIT_VALIDATION)
            self.assertEqual(self._main(["run", "--config", TEST_CONFIG, "--set", "nosuch=1", "--out", tmp]),
                             EXIT_VALIDATION)
            absent = os.path.join(tmp, 'absent')
            self.assertEqual(self._main(["run", "--config", TEST_CONFIG, "--set", f"basis.dir={absent}",
                                         "--out", tmp]), EXIT_RUNTIME)
            self.assertEqual(self._main([]), EXIT_VALIDATION)

    def test_seed_and_jobs_flags(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = self._main(["compare", "--config", TEST_CONFIG, "--seed", "5", "--jobs", "2", "--out", tmp])
            self.assertEqual(code, EXIT_OK)
            per_seed = pd.read_csv(os.path.join(tmp, 'comparison_per_seed.csv'))
            self.assertEqual(set(per_seed['seed']), {5})

    def test_output_dir_from_environment(self):
        with tempfile.TemporaryDirectory() as tmp:
            with patch.dict(os.environ, {'SVDCACHE_OUT': tmp}):
                self.assertEqual(self._main(["synth", "--config", TEST_CONFIG, "--seed", "2"]), EXIT_OK)
            self.assertTrue(os.path.exists(os.path.join(tmp, 'trajectory_seed2.svct')))

    def test_selftest_exit_codes(self):
        self.assertEqual(self._main(["selftest"]), EXIT_OK)
        self.assertEqual(self._main(["selftest", "--inject-corruption"]), EXIT_RUNTIME)


if __name__ == "__main__":
    unittest.main()
