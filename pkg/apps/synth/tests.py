"""
Tests for the synthetic data generator and oracle.
"""
import dataclasses
import io
import json
import tempfile
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from apps.core.exceptions import ConfigurationError
from apps.datasets.dataset import load_dataset

from .factories import SynthConfigFactory
from .generator import (
    Nonlinearity, SynthConfig, generate, load_ground_truth, oracle_profile, render_dataset,
    sample_ground_truth, save_ground_truth,
)


class GenerateTestCase(SimpleTestCase):
    """
    Test synthetic dataset generation.
    """

    def test_identity_map_reproduces_latents(self):
        """Test that W=I, bias 0, no noise gives s_c + p_k exactly."""
        config = SynthConfigFactory(genes=4, latent=4)
        gt = sample_ground_truth(config)
        gt = dataclasses.replace(gt, map_weights=np.eye(4), map_bias=np.zeros(4))
        dataset = render_dataset(config, gt)
        for (line, pert), rows in dataset.conditions().items():
            expected = (gt.basal_of(line) + gt.pert_of(pert)).astype(np.float32)
            for row in rows:
                np.testing.assert_array_equal(dataset.values[row], expected)
        for line in gt.cell_line_names:
            rows = dataset.rows_for('control', line)
            np.testing.assert_array_equal(dataset.values[rows[0]], gt.basal_of(line).astype(np.float32))

    def test_noiseless_conditions_are_constant(self):
        """Test that all cells of a condition are identical without noise."""
        dataset, _ = generate(SynthConfigFactory(nonlinearity=Nonlinearity.SOFTPLUS))
        for rows in dataset.conditions().values():
            self.assertTrue(np.all(dataset.values[rows] == dataset.values[rows[0]]))

    def test_row_count_includes_controls(self):
        """Test that K=6, C=2, 10 cells give (6+1)*2*10 = 140 rows."""
        config = SynthConfigFactory(perts=6, cell_lines=2, cells_per_condition=10)
        dataset, _ = generate(config)
        self.assertEqual(len(dataset), 140)
        self.assertEqual(config.n_rows, 140)
        self.assertEqual(int(dataset.is_control.sum()), 20)

    def test_generate_is_pure(self):
        """Test that identical configs give identical datasets."""
        config = SynthConfigFactory(noise_sigma=0.1, seed=42)
        first, _ = generate(config)
        second, _ = generate(config)
        self.assertEqual(first.values.tobytes(), second.values.tobytes())
        self.assertEqual(list(first.obs['cell_id']), list(second.obs['cell_id']))

    def test_noise_changes_cells(self):
        """Test that noise makes cells of one condition differ."""
        dataset, _ = generate(SynthConfigFactory(noise_sigma=0.5))
        rows = next(iter(dataset.conditions().values()))
        self.assertGreater(float(dataset.values[rows].std(axis=0).max()), 0.0)

    def test_noisy_softplus_cells_are_non_negative(self):
        """Test that default synthetic cells never go below zero."""
        for seed in range(4):
            dataset, _ = generate(SynthConfig(seed=seed))
            self.assertGreaterEqual(float(dataset.values.min()), 0.0)

    def test_identity_cells_are_not_clipped(self):
        """Test that the identity map keeps negative values."""
        dataset, _ = generate(SynthConfigFactory(noise_sigma=0.5, seed=3))
        self.assertLess(float(dataset.values.min()), 0.0)

    def test_perturbations_are_distinct(self):
        """Test that sampled perturbation vectors are pairwise distinct."""
        _, gt = generate(SynthConfigFactory(perts=10))
        self.assertGreater(gt.min_pert_distance(), 0.0)

    def test_invalid_configs(self):
        """Test config validation guards."""
        with self.assertRaises(ConfigurationError):
            generate(SynthConfigFactory(perts=2))
        with self.assertRaises(ConfigurationError):
            generate(SynthConfigFactory(genes=3, latent=4))
        with self.assertRaises(ConfigurationError):
            generate(SynthConfigFactory(noise_sigma=-0.1))


class OracleTestCase(SimpleTestCase):
    """
    Test noiseless oracle targets.
    """

    def setUp(self):
        self.config = SynthConfigFactory(nonlinearity=Nonlinearity.SOFTPLUS)
        self.dataset, self.gt = generate(self.config)

    def test_empty_list_is_control(self):
        """Test that no perturbation gives the control target."""
        rows = self.dataset.rows_for('control', 'line_0')
        np.testing.assert_array_equal(oracle_profile(self.gt, 'line_0', []), self.dataset.values[rows[0]])

    def test_single_perturbation_matches_condition_mean(self):
        """Test that the empirical condition mean equals the oracle at noise 0."""
        for (line, pert), rows in self.dataset.conditions().items():
            mean = self.dataset.values[rows].mean(axis=0, dtype=np.float64)
            np.testing.assert_array_equal(mean, oracle_profile(self.gt, line, [pert]))

    def test_dual_target_is_commutative(self):
        """Test that a dual target depends only on the pair of names."""
        forward_order = oracle_profile(self.gt, 'line_1', ['pert_00', 'pert_03'])
        np.testing.assert_array_equal(forward_order, oracle_profile(self.gt, 'line_1', ['pert_03', 'pert_00']))
        np.testing.assert_array_equal(forward_order, oracle_profile(self.gt, 'line_1', ['pert_00+pert_03']))

    def test_dual_target_adds_latents(self):
        """Test that a dual target decodes the summed latent vectors."""
        latent = self.gt.basal_of('line_0') + self.gt.pert_of('pert_01') + self.gt.pert_of('pert_02')
        expected = np.logaddexp(0.0, self.gt.map_weights @ latent + self.gt.map_bias).astype(np.float32)
        np.testing.assert_allclose(oracle_profile(self.gt, 'line_0', ['pert_01', 'pert_02']), expected, rtol=1e-6)

    def test_unknown_names(self):
        """Test that unknown cell lines or perturbations are configuration errors."""
        with self.assertRaises(ConfigurationError):
            oracle_profile(self.gt, 'line_9', [])
        with self.assertRaises(ConfigurationError):
            oracle_profile(self.gt, 'line_0', ['nope'])

    def test_ground_truth_json_round_trip(self):
        """Test that ground truth survives JSON with decimal-string floats."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'ground_truth.json'
            save_ground_truth(self.gt, path)
            payload = json.loads(path.read_text(encoding='utf-8'))
            self.assertIsInstance(payload['map_bias'][0], str)
            loaded = load_ground_truth(path)
        np.testing.assert_array_equal(loaded.basal, self.gt.basal)
        np.testing.assert_array_equal(loaded.pert, self.gt.pert)
        np.testing.assert_array_equal(loaded.map_weights, self.gt.map_weights)
        np.testing.assert_array_equal(loaded.map_bias, self.gt.map_bias)
        self.assertEqual(loaded.nonlinearity, self.gt.nonlinearity)


class GenSynthCommandTestCase(SimpleTestCase):
    """
    Test the gen_synth management command.
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def _run(self, name, **flags):
        output = Path(self.tmp.name) / name
        call_command('gen_synth', output=str(output), stdout=io.StringIO(), **flags)
        return output

    def test_row_count(self):
        """Test the (K+1)*C*cells counting rule on the written TSV."""
        output = self._run('a', genes=20, latent=4, perts=5, cell_lines=2, cells=4, noise=0.05, seed=1)
        dataset = load_dataset(output / 'dataset.tsv')
        self.assertEqual(len(dataset), (5 + 1) * 2 * 4)
        self.assertEqual(dataset.n_genes, 20)
        self.assertTrue((output / 'ground_truth.json').exists())
        self.assertTrue((output / 'resolved_config.json').exists())

    def test_same_flags_same_bytes(self):
        """Test that identical flags write byte-identical files."""
        flags = dict(genes=10, latent=3, perts=4, cell_lines=1, cells=3, noise=0.1, seed=7)
        first = self._run('first', **flags)
        second = self._run('second', **flags)
        for name in ('dataset.tsv', 'ground_truth.json', 'resolved_config.json'):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes())

    def test_too_few_perturbations_exits_2(self):
        """Test that --perts 2 is a configuration error with exit code 2."""
        with self.assertRaises(CommandError) as ctx:
            self._run('bad', perts=2)
        self.assertEqual(ctx.exception.returncode, 2)
