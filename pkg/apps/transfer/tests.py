"""
Tests for the cross-transfer model, its objective, training and commands.
"""
import io
import json
import os
import tempfile
import unittest
from itertools import combinations
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from apps.core.exceptions import ConfigurationError, FormatError, NumericError, ShapeError
from apps.datasets.dataset import ExpressionDataset, load_dataset, save_dataset
from apps.datasets.pairing import PairedSample
from apps.evaluation.degs import DEG_TABLE_COLUMNS
from apps.evaluation.metrics import r_squared
from apps.nn.gradcheck import max_relative_error, numerical_gradients
from apps.nn.layers import Mode
from apps.nn.network import trainable
from apps.synth.factories import SynthConfigFactory
from apps.synth.generator import Nonlinearity, generate, oracle_profile

from . import trainer as trainer_module
from .checkpoints import MANIFEST_NAME, PARAMS_NAME, check_gene_dim, load_checkpoint, save_checkpoint
from .config import LossWeights, ModelConfig, load_run_config, parse_ablate
from .engine import LossBreakdown, ModelOptimizerStates, evaluation_loss, objective, training_step
from .factories import LossWeightsFactory, ModelConfigFactory, random_batch
from .inference import (
    compose, decode, encode_basal, encode_perturbation, mean_embedding, predict_combo,
    predict_combo_mean, predict_transfer,
)
from .losses import loss_cross, loss_orth, loss_reco1, loss_reco2, loss_sim, squared_error
from .model import LatentVector, ModelParams, Role, init_model
from .trainer import Trainer

FD_STEP = 1e-5
RUN_SLOW = os.environ.get('XTRANSFER_RUN_SLOW') == '1'


def write_synthetic(directory, **overrides):
    """Write a small synthetic dataset TSV and return (path, dataset, ground truth)."""
    values = dict(genes=12, latent=4, perts=8, cell_lines=2, cells_per_condition=5,
                  nonlinearity=Nonlinearity.SOFTPLUS, seed=11)
    values.update(overrides)
    dataset, ground_truth = generate(SynthConfigFactory(**values))
    path = Path(directory) / 'dataset.tsv'
    save_dataset(dataset, path)
    return path, dataset, ground_truth


def small_run_document(dataset_path, **model):
    document = {
        'model': {'encoder_hidden': [8, 4], 'latent_dim': 3, 'dropout_rate': 0.1, 'lr': 1e-3,
                  'epochs': 2, 'batch_size': 4, 'seed': 5, **model},
        'data': {'dataset_path': str(dataset_path), 'split': {'ratios': [0.5, 0.25, 0.25]}},
        'train': {'seed': 3},
    }
    return document


class RunConfigTestCase(SimpleTestCase):
    """
    Test loading and resolving run configurations.
    """

    def test_defaults_become_explicit(self):
        """Test that a minimal document resolves every default."""
        config = load_run_config({'data': {'dataset_path': 'cells.tsv'}})
        resolved = config.to_dict()
        self.assertEqual(resolved['model']['encoder_hidden'], [1024, 512, 256])
        self.assertEqual(resolved['model']['latent_dim'], 128)
        self.assertEqual(resolved['model']['epochs'], 60)
        self.assertEqual(resolved['model']['loss_weights'],
                         {'sim': 1.0, 'orth': 1.0, 'reco1': 1.0, 'reco2': 1.0, 'cross': 1.0})
        self.assertEqual(resolved['data']['split'], {
            'mode': 'ratio', 'ratios': [0.8, 0.1, 0.1], 'test_perturbations': [], 'val_fraction': 0.2,
        })
        self.assertEqual(resolved['eval'], {'k': 50, 'threshold': 1.0, 'epsilon': 1e-6, 'log1p_data': False})
        self.assertIsNone(resolved['model']['gene_dim'])

    def test_resolved_document_loads_again(self):
        """Test that the resolved copy is itself a valid configuration."""
        config = load_run_config({'data': {'dataset_path': 'cells.tsv'}, 'model': {'latent_dim': 8}})
        again = load_run_config(json.loads(json.dumps(config.to_dict())))
        self.assertEqual(again.to_dict(), config.to_dict())

    def test_unknown_section_is_rejected(self):
        """Test that an unknown top-level section is a configuration error."""
        with self.assertRaises(ConfigurationError):
            load_run_config({'data': {'dataset_path': 'x'}, 'optimizer': {}})

    def test_unknown_key_is_rejected(self):
        """Test that an undeclared key inside a section is a configuration error."""
        with self.assertRaisesRegex(ConfigurationError, 'model'):
            load_run_config({'data': {'dataset_path': 'x'}, 'model': {'width': 3}})

    def test_missing_data_section(self):
        """Test that the data section is required."""
        with self.assertRaises(ConfigurationError):
            load_run_config({'model': {}})

    def test_seed_override_sets_model_and_train(self):
        """Test that --seed replaces both seeds."""
        config = load_run_config({'data': {'dataset_path': 'x'}}, seed=42)
        self.assertEqual(config.model['seed'], 42)
        self.assertEqual(config.train.seed, 42)

    def test_ablate_zeroes_named_weights(self):
        """Test that ablated terms get weight 0 and are recorded."""
        config = load_run_config({'data': {'dataset_path': 'x'}}, ablate=['cross', 'sim'])
        self.assertEqual(config.model['loss_weights']['cross'], 0.0)
        self.assertEqual(config.model['loss_weights']['sim'], 0.0)
        self.assertEqual(config.model['loss_weights']['orth'], 1.0)
        self.assertEqual(config.ablated, ('cross', 'sim'))

    def test_ablate_unknown_term(self):
        """Test that ablating an unknown term is a configuration error."""
        with self.assertRaises(ConfigurationError):
            load_run_config({'data': {'dataset_path': 'x'}}, ablate=['style'])

    def test_parse_ablate(self):
        """Test splitting of the --ablate flag value."""
        self.assertEqual(parse_ablate('sim, orth,,cross'), ['sim', 'orth', 'cross'])
        self.assertEqual(parse_ablate(None), [])

    def test_gene_dim_mismatch(self):
        """Test that a configured gene_dim must match the dataset."""
        config = load_run_config({'data': {'dataset_path': 'x'}, 'model': {'gene_dim': 5}})
        with self.assertRaises(ShapeError):
            config.with_gene_dim(6)
        self.assertEqual(config.with_gene_dim(5).model_config().gene_dim, 5)

    def test_holdout_needs_names(self):
        """Test that holdout mode without test perturbations is rejected."""
        with self.assertRaises(ConfigurationError):
            load_run_config({'data': {'dataset_path': 'x', 'split': {'mode': 'holdout'}}})

    def test_model_config_guards(self):
        """Test range checks of ModelConfig."""
        with self.assertRaises(ConfigurationError):
            ModelConfigFactory(batch_size=1)
        with self.assertRaises(ConfigurationError):
            ModelConfigFactory(dropout_rate=1.0)
        with self.assertRaises(ConfigurationError):
            LossWeights(cross=-1.0)


class ModelTestCase(SimpleTestCase):
    """
    Test model initialization and the encode/decode contracts.
    """

    def setUp(self):
        self.config = ModelConfigFactory(gene_dim=6, encoder_hidden=(8, 4), latent_dim=3, seed=1)
        self.params = init_model(self.config)
        self.x = np.random.default_rng(0).normal(size=(5, 6)).astype(np.float32)

    def test_default_architecture_shapes(self):
        """Test the 1024-512-256-128 encoder and its mirrored decoder."""
        params = init_model(ModelConfig(gene_dim=10))
        self.assertEqual(params.es['0.weight'].shape, (1024, 10))
        self.assertEqual(params.ep['0.weight'].shape, (1024, 10))
        heads = [key for key in params.es if key.endswith('.weight')]
        self.assertEqual(params.es[heads[-1]].shape, (128, 256))
        self.assertEqual(params.d['0.weight'].shape, (256, 128))
        last = [key for key in params.d if key.endswith('.weight')][-1]
        self.assertEqual(params.d[last].shape, (10, 1024))

    def test_encoders_do_not_share_parameters(self):
        """Test that E_s and E_p start from different weights."""
        self.assertFalse(np.array_equal(self.params.es['0.weight'], self.params.ep['0.weight']))

    def test_encode_shapes_and_roles(self):
        """Test latent shapes and role tags."""
        basal = encode_basal(self.params, self.x)
        perturbation = encode_perturbation(self.params, self.x)
        self.assertEqual(basal.values.shape, (5, 3))
        self.assertEqual(basal.role, Role.BASAL)
        self.assertEqual(perturbation.role, Role.PERTURBATION)
        self.assertEqual(decode(self.params, basal).shape, (5, 6))

    def test_identical_rows_encode_identically(self):
        """Test eval-mode determinism across identical rows."""
        x = np.repeat(self.x[:1], 3, axis=0)
        values = encode_basal(self.params, x).values
        np.testing.assert_array_equal(values[0], values[1])
        np.testing.assert_array_equal(values[1], values[2])

    def test_width_mismatch(self):
        """Test that profiles of the wrong width raise a shape error."""
        with self.assertRaises(ShapeError):
            encode_basal(self.params, np.zeros((2, 5), dtype=np.float32))
        with self.assertRaises(ShapeError):
            decode(self.params, np.zeros((2, 4), dtype=np.float32))

    def test_flat_round_trip(self):
        """Test that flat() and from_flat() are inverses."""
        again = ModelParams.from_flat(self.config, self.params.flat())
        for key, value in self.params.flat().items():
            np.testing.assert_array_equal(again.flat()[key], value)


class InferenceTestCase(SimpleTestCase):
    """
    Test cross-context transfer and dual-perturbation composition.
    """

    def setUp(self):
        self.params = init_model(ModelConfigFactory(gene_dim=6, encoder_hidden=(8, 4), latent_dim=3, seed=2))
        rng = np.random.default_rng(1)
        self.source = rng.normal(size=(4, 6)).astype(np.float32)
        self.other = rng.normal(size=(4, 6)).astype(np.float32)
        self.control = rng.normal(size=(1, 6)).astype(np.float32)

    def test_transfer_shape(self):
        """Test that one control row is applied to every source row."""
        self.assertEqual(predict_transfer(self.params, self.source, self.control).shape, (4, 6))

    def test_zero_perturbation_reduces_to_control_reconstruction(self):
        """Test D(E_s(X_c) + 0) == D(E_s(X_c)) exactly."""
        basal = encode_basal(self.params, self.control)
        zero = LatentVector(values=np.zeros((1, 3), dtype=np.float32), role=Role.PERTURBATION)
        expected = decode(self.params, basal)
        np.testing.assert_array_equal(compose(self.params, basal, [zero]), expected)
        np.testing.assert_array_equal(compose(self.params, basal, [None, None]), expected)

    def test_transfer_matches_manual_composition(self):
        """Test predict_transfer against explicit encode/decode."""
        basal = encode_basal(self.params, self.control).values
        perturbation = encode_perturbation(self.params, self.source).values
        expected = decode(self.params, basal + perturbation)
        np.testing.assert_allclose(predict_transfer(self.params, self.source, self.control), expected,
                                   rtol=1e-6, atol=1e-6)

    def test_combo_of_same_perturbation_doubles_it(self):
        """Test that a = b gives decode(S + 2P)."""
        basal = encode_basal(self.params, self.control).values
        perturbation = encode_perturbation(self.params, self.source).values
        expected = decode(self.params, basal + 2.0 * perturbation)
        actual = predict_combo(self.params, self.source, self.source, self.control)
        np.testing.assert_allclose(actual, expected, rtol=1e-5, atol=1e-5)

    def test_combo_mean_is_one_row(self):
        """Test that the mean-embedding combo prediction is a single profile."""
        prediction = predict_combo_mean(self.params, self.source, self.other, self.control[0])
        self.assertEqual(prediction.shape, (1, 6))

    def test_mean_embedding(self):
        """Test that mean_embedding keeps the role and averages rows."""
        latent = LatentVector(values=np.array([[0.0, 2.0], [2.0, 0.0]], dtype=np.float32), role=Role.BASAL)
        mean = mean_embedding(latent)
        np.testing.assert_array_equal(mean.values, [[1.0, 1.0]])
        self.assertEqual(mean.role, Role.BASAL)

    def test_incompatible_batches(self):
        """Test that two multi-row batches of different size cannot be composed."""
        with self.assertRaises(ShapeError):
            predict_combo(self.params, self.source, self.source[:3], self.control)


class LossIdentityTestCase(SimpleTestCase):
    """
    Test the loss terms on hand-computed cases.
    """

    def test_orth_is_zero_for_orthogonal_pairs(self):
        """Test loss_orth on per-sample orthogonal vectors."""
        value = loss_orth(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]),
                          np.array([[0.0, 2.0]]), np.array([[3.0, 0.0]]))
        self.assertEqual(value, 0.0)

    def test_orth_hand_case(self):
        """Test loss_orth = 0 + 2^2 = 4."""
        value = loss_orth(np.array([[1.0, 2.0]]), np.array([[2.0, -1.0]]),
                          np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]]))
        self.assertAlmostEqual(value, 4.0, places=12)

    def test_orth_is_homogeneous(self):
        """Test that doubling Pa quadruples its term."""
        sa = np.array([[1.0, 0.5]])
        zero = np.zeros((1, 2))
        single = loss_orth(np.array([[2.0, 1.0]]), sa, zero, zero)
        double = loss_orth(np.array([[4.0, 2.0]]), sa, zero, zero)
        self.assertAlmostEqual(double, 4.0 * single, places=10)

    def test_orth_batch_mismatch(self):
        """Test that mismatched batches raise a shape error."""
        with self.assertRaises(ShapeError):
            loss_orth(np.zeros((2, 2)), np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((2, 2)))

    def test_sim_is_zero_for_identical_embeddings(self):
        """Test loss_sim(S, S) = 0."""
        s = np.random.default_rng(0).normal(size=(3, 4))
        self.assertAlmostEqual(loss_sim(s, s), 0.0, places=12)

    def test_sim_hand_case(self):
        """Test KL([0.5, 0.5] || [0.9, 0.1]) ~ 0.5108."""
        value = loss_sim(np.array([[0.0, 0.0]]), np.array([[np.log(9.0), 0.0]]))
        expected = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
        self.assertAlmostEqual(value, expected, places=9)
        self.assertAlmostEqual(value, 0.5108, delta=1e-3)

    def test_sim_is_non_negative(self):
        """Test Gibbs' inequality on random embeddings."""
        rng = np.random.default_rng(3)
        for _ in range(20):
            self.assertGreaterEqual(loss_sim(rng.normal(size=(4, 5)), rng.normal(size=(4, 5))), 0.0)

    def test_reconstruction_hand_case(self):
        """Test (0 + 1) + (1 + 0) = 2 for N=1, G=2."""
        x = np.array([[1.0, 0.0]])
        value = squared_error(np.array([[1.0, 1.0]]), x)[0] + squared_error(np.array([[0.0, 0.0]]), x)[0]
        self.assertEqual(value, 2.0)

    def test_squared_error_gradient(self):
        """Test d/dY of the batch-mean squared error."""
        _, grad = squared_error(np.array([[1.0, 3.0], [0.0, 0.0]]), np.array([[0.0, 1.0], [0.0, 2.0]]))
        np.testing.assert_allclose(grad, [[1.0, 2.0], [0.0, -2.0]])

    def test_cross_equals_reco2_when_basal_states_coincide(self):
        """Test loss_cross = loss_reco2 when Sa = Sb."""
        params = init_model(ModelConfigFactory(gene_dim=5, latent_dim=3, seed=4))
        rng = np.random.default_rng(4)
        s = rng.normal(size=(3, 3)).astype(np.float32)
        pa, pb = (rng.normal(size=(3, 3)).astype(np.float32) for _ in range(2))
        xa, xb = (rng.normal(size=(3, 5)).astype(np.float32) for _ in range(2))
        cross = loss_cross(params, s, pa, s, pb, xa, xb)
        reco2 = loss_reco2(params, s, pa, s, pb, xa, xb)
        self.assertAlmostEqual(cross, reco2, delta=1e-6)

    def test_reco2_with_zero_perturbations_is_reco1(self):
        """Test the additive identity of the perturbed reconstruction."""
        params = init_model(ModelConfigFactory(gene_dim=5, latent_dim=3, seed=5))
        rng = np.random.default_rng(5)
        sa, sb = (rng.normal(size=(2, 3)).astype(np.float32) for _ in range(2))
        x = rng.normal(size=(2, 5)).astype(np.float32)
        zero = np.zeros((2, 3), dtype=np.float32)
        self.assertAlmostEqual(loss_reco2(params, sa, zero, sb, zero, x, x),
                               loss_reco1(params, sa, sb, x), delta=1e-6)


class ObjectiveTestCase(SimpleTestCase):
    """
    Test the full objective, its gradients and the training step.
    """

    def test_gradients_match_finite_differences(self):
        """Test analytic gradients of the weighted objective on 10 random small models."""
        rng = np.random.default_rng(2024)
        weights = LossWeightsFactory(sim=0.7, orth=1.3, reco1=1.0, reco2=0.5, cross=2.0)
        for trial in range(10):
            config = ModelConfigFactory(
                gene_dim=int(rng.integers(3, 13)),
                encoder_hidden=(int(rng.integers(2, 17)), int(rng.integers(2, 9))),
                latent_dim=int(rng.integers(2, 5)),
                seed=trial,
            )
            params = init_model(config).cast(np.float64)
            batch = random_batch(config.gene_dim, size=4, seed=trial, dtype=np.float64)

            def total(flat):
                candidate = ModelParams.from_flat(config, flat)
                return objective(candidate, batch, weights, rng_seed=trial, compute_grads=False).breakdown.total

            result = objective(params, batch, weights, rng_seed=trial)
            analytic = {f'{name}.{key}': value
                        for name, grads in result.grads.items() for key, value in grads.items()}
            numeric = numerical_gradients(total, params.flat(), step=FD_STEP)
            errors = max_relative_error(analytic, numeric)
            self.assertLess(max(errors.values()), 1e-3, msg=f"trial {trial}: {errors}")

    def test_total_is_weighted_sum(self):
        """Test LossBreakdown.total against its components."""
        params = init_model(ModelConfigFactory(seed=3))
        weights = LossWeightsFactory(sim=0.5, orth=2.0, reco1=1.0, reco2=0.25, cross=3.0)
        breakdown = objective(params, random_batch(6, seed=3), weights).breakdown
        expected = (0.5 * breakdown.sim + 2.0 * breakdown.orth + breakdown.reco1
                    + 0.25 * breakdown.reco2 + 3.0 * breakdown.cross)
        self.assertAlmostEqual(breakdown.total, expected, delta=1e-6)

    def test_unit_weights_total(self):
        """Test total = sim + orth + reco1 + reco2 + cross with unit weights."""
        params = init_model(ModelConfigFactory(seed=8))
        states = ModelOptimizerStates.fresh(params)
        _, _, breakdown = training_step(params, states, random_batch(6, seed=8), LossWeightsFactory(), 0)
        parts = breakdown.sim + breakdown.orth + breakdown.reco1 + breakdown.reco2 + breakdown.cross
        self.assertAlmostEqual(breakdown.total, parts, delta=1e-6)

    def test_zero_weights_leave_parameters(self):
        """Test that an all-zero objective neither scores nor moves trainable parameters."""
        params = init_model(ModelConfigFactory(seed=6))
        states = ModelOptimizerStates.fresh(params)
        zero = LossWeights(sim=0.0, orth=0.0, reco1=0.0, reco2=0.0, cross=0.0)
        new_params, new_states, breakdown = training_step(params, states, random_batch(6, seed=6), zero, 0)
        self.assertEqual(breakdown.total, 0.0)
        for name, network in params.networks():
            updated = dict(new_params.networks())[name]
            for key, value in trainable(network).items():
                np.testing.assert_array_equal(updated[key], value)
        self.assertEqual(new_states.es.step, 1)

    def test_single_pair_batch_is_rejected(self):
        """Test that a train-mode batch needs at least 2 pairs."""
        params = init_model(ModelConfigFactory(seed=1))
        with self.assertRaises(ShapeError):
            objective(params, random_batch(6, size=1), LossWeightsFactory())

    def test_non_finite_loss_names_the_term(self):
        """Test that a non-finite input aborts with a numeric error naming a term."""
        params = init_model(ModelConfigFactory(seed=1))
        batch = random_batch(6, seed=1)
        batch.x_a[0, 0] = np.inf
        with self.assertRaisesRegex(NumericError, 'sim'):
            objective(params, batch, LossWeightsFactory())

    def test_training_decreases_loss(self):
        """Test that 200 steps on 50 pairs lower the total loss."""
        config = ModelConfigFactory(gene_dim=12, encoder_hidden=(16, 8), latent_dim=4, lr=1e-3, seed=0)
        params = init_model(config)
        states = ModelOptimizerStates.fresh(params)
        batch = random_batch(12, size=50, seed=9)
        weights = LossWeightsFactory()
        first = None
        for step in range(200):
            params, states, breakdown = training_step(params, states, batch, weights, rng_seed=step)
            if first is None:
                first = breakdown.total
        self.assertLess(breakdown.total, first)

    def test_evaluation_loss(self):
        """Test eval-mode scoring over batches and its empty case."""
        params = init_model(ModelConfigFactory(seed=2))
        self.assertIsNone(evaluation_loss(params, [], LossWeightsFactory()))
        rng = np.random.default_rng(0)
        pairs = [PairedSample(x_control=rng.normal(size=6).astype(np.float32),
                              x_a=rng.normal(size=6).astype(np.float32),
                              x_b=rng.normal(size=6).astype(np.float32),
                              pert_a='a', pert_b='b', cell_line='L') for _ in range(3)]
        breakdown = evaluation_loss(params, [pairs[:2], pairs[2:]], LossWeightsFactory())
        self.assertIsInstance(breakdown, LossBreakdown)
        single = objective(params, pairs[2:], LossWeightsFactory(), mode=Mode.EVAL).breakdown
        pair = objective(params, pairs[:2], LossWeightsFactory(), mode=Mode.EVAL).breakdown
        self.assertAlmostEqual(breakdown.total, (2 * pair.total + single.total) / 3, delta=1e-9)


class CheckpointTestCase(SimpleTestCase):
    """
    Test the checkpoint directory format.
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'ckpt'
        self.params = init_model(ModelConfigFactory(seed=12))
        save_checkpoint(self.params, self.path)

    def test_round_trip_is_bit_exact(self):
        """Test that save then load reproduces every tensor and the config."""
        loaded, config = load_checkpoint(self.path)
        self.assertEqual(config, self.params.config)
        for key, value in self.params.flat().items():
            self.assertEqual(loaded.flat()[key].tobytes(), value.tobytes())

    def test_manifest_table(self):
        """Test the manifest's tensor table and digest fields."""
        manifest = json.loads((self.path / MANIFEST_NAME).read_text(encoding='utf-8'))
        self.assertEqual(manifest['format_version'], 1)
        self.assertEqual(len(manifest['fnv1a64']), 16)
        entries = manifest['tensors']
        self.assertEqual(entries[0]['offset'], 0)
        for before, after in zip(entries, entries[1:]):
            self.assertEqual(after['offset'], before['offset'] + before['length'])
        self.assertEqual(manifest['params_bytes'], (self.path / PARAMS_NAME).stat().st_size)

    def test_truncated_params_is_a_format_error(self):
        """Test that a truncated params.bin is detected."""
        blob = (self.path / PARAMS_NAME).read_bytes()
        (self.path / PARAMS_NAME).write_bytes(blob[:-4])
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)

    def test_corrupted_params_is_a_format_error(self):
        """Test that a flipped byte fails the digest."""
        blob = bytearray((self.path / PARAMS_NAME).read_bytes())
        blob[10] ^= 0xFF
        (self.path / PARAMS_NAME).write_bytes(bytes(blob))
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)

    def test_missing_manifest(self):
        """Test that a directory without manifest is a format error."""
        (self.path / MANIFEST_NAME).unlink()
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)

    def test_unsupported_version(self):
        """Test that another format version is refused."""
        manifest_path = self.path / MANIFEST_NAME
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
        manifest['format_version'] = 99
        manifest_path.write_text(json.dumps(manifest), encoding='utf-8')
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)

    def test_gene_dim_guard(self):
        """Test that a dataset with another gene count is a shape error."""
        check_gene_dim(self.params.config, 6)
        with self.assertRaises(ShapeError):
            check_gene_dim(self.params.config, 7)


class TrainerTestCase(SimpleTestCase):
    """
    Test the training driver on a small synthetic dataset.
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.dataset_path, self.dataset, _ = write_synthetic(self.root)

    def _train(self, name, ablate=(), **model):
        config = load_run_config(small_run_document(self.dataset_path, **model), ablate=ablate)
        return Trainer(config, self.root / name).run()

    def test_outputs(self):
        """Test manifest, history and both checkpoints."""
        result = self._train('run')
        manifest = json.loads((self.root / 'run' / 'run_manifest.json').read_text(encoding='utf-8'))
        self.assertEqual(manifest['status'], 'completed')
        self.assertEqual([entry['epoch'] for entry in manifest['history']], [1, 2])
        self.assertEqual(manifest['dataset']['genes'], 12)
        self.assertEqual(len(manifest['dataset']['sha256']), 64)
        self.assertEqual(manifest['best_epoch'], result.best_epoch)
        self.assertEqual(manifest['resolved_config']['model']['gene_dim'], 12)
        self.assertEqual(set(manifest['split'].values()), {'train', 'val', 'test'})
        for directory in ('best', 'last'):
            params, config = load_checkpoint(self.root / 'run' / 'checkpoints' / directory)
            self.assertEqual(config.gene_dim, 12)

    def test_same_config_same_history_and_checkpoints(self):
        """Test that a rerun reproduces the loss history and parameter bytes."""
        self._train('first')
        self._train('second')
        first = json.loads((self.root / 'first' / 'run_manifest.json').read_text(encoding='utf-8'))
        second = json.loads((self.root / 'second' / 'run_manifest.json').read_text(encoding='utf-8'))
        self.assertEqual(first['history'], second['history'])
        for directory in ('best', 'last'):
            self.assertEqual(
                (self.root / 'first' / 'checkpoints' / directory / PARAMS_NAME).read_bytes(),
                (self.root / 'second' / 'checkpoints' / directory / PARAMS_NAME).read_bytes(),
            )

    def test_ablation_is_recorded(self):
        """Test that --ablate cross is echoed in the manifest."""
        self._train('ablated', ablate=['cross'])
        manifest = json.loads((self.root / 'ablated' / 'run_manifest.json').read_text(encoding='utf-8'))
        self.assertEqual(manifest['ablated'], ['cross'])
        self.assertEqual(manifest['resolved_config']['model']['loss_weights']['cross'], 0.0)
        train = manifest['history'][0]['train']
        self.assertAlmostEqual(train['total'], sum(train[t] for t in ('sim', 'orth', 'reco1', 'reco2')), delta=1e-6)

    def test_numeric_failure_keeps_last_checkpoint(self):
        """Test that a non-finite loss aborts the run and preserves last/."""
        real_step = trainer_module.training_step
        calls = []

        def failing_step(*args, **kwargs):
            calls.append(1)
            if len(calls) > 1:
                raise NumericError("Non-finite reco2 loss (nan)")
            return real_step(*args, **kwargs)

        with mock.patch.object(trainer_module, 'training_step', side_effect=failing_step):
            with self.assertRaises(NumericError):
                self._train('aborted')
        manifest = json.loads((self.root / 'aborted' / 'run_manifest.json').read_text(encoding='utf-8'))
        self.assertEqual(manifest['status'], 'aborted')
        self.assertIn('reco2', manifest['error'])
        load_checkpoint(self.root / 'aborted' / 'checkpoints' / 'last')
        self.assertFalse((self.root / 'aborted' / 'checkpoints' / 'best').exists())


class CommandTestCase(SimpleTestCase):
    """
    Test the train, predict, predict_combo and export_embeddings commands.
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.dataset_path, cls.dataset, _ = write_synthetic(cls.root)
        config_path = cls.root / 'run.json'
        config_path.write_text(json.dumps(small_run_document(cls.dataset_path)), encoding='utf-8')
        cls.stdout = io.StringIO()
        call_command('train', config=str(config_path), output=str(cls.root / 'run'), stdout=cls.stdout)
        cls.checkpoint = cls.root / 'run' / 'checkpoints' / 'best'

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def _call(self, name, **options):
        call_command(name, stdout=io.StringIO(), **options)

    def test_train_outputs(self):
        """Test the files written by train."""
        run = self.root / 'run'
        for name in ('run_manifest.json', 'resolved_config.json', 'test_report.json', 'test_report.csv'):
            self.assertTrue((run / name).exists(), name)
        resolved = json.loads((run / 'resolved_config.json').read_text(encoding='utf-8'))
        self.assertEqual(resolved['model']['gene_dim'], 12)
        self.assertIn('Training finished', self.stdout.getvalue())

    def test_train_without_config_exits_2(self):
        """Test that train needs --config."""
        with self.assertRaises(CommandError) as ctx:
            self._call('train', output=str(self.root / 'none'))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_predict_relabels_cell_line(self):
        """Test that predictions keep the label and take the target cell line."""
        output = self.root / 'pred' / 'out.tsv'
        self._call('predict', checkpoint=str(self.checkpoint), dataset=str(self.dataset_path),
                   source_pert='pert_00', target_cell_line='line_1', output=str(output))
        predictions = load_dataset(output)
        self.assertEqual(len(predictions), 10)
        self.assertEqual(set(predictions.obs['perturbation']), {'pert_00'})
        self.assertEqual(set(predictions.obs['cell_line']), {'line_1'})
        self.assertTrue((output.parent / 'out.tsv.resolved_config.json').exists())

    def test_predict_unknown_perturbation_exits_5(self):
        """Test that an unknown --source-pert is a data error."""
        with self.assertRaises(CommandError) as ctx:
            self._call('predict', checkpoint=str(self.checkpoint), dataset=str(self.dataset_path),
                       source_pert='nothing', target_cell_line='line_1',
                       output=str(self.root / 'bad.tsv'))
        self.assertEqual(ctx.exception.returncode, 5)

    def test_predict_missing_checkpoint_exits_5(self):
        """Test that a missing checkpoint manifest is a format error."""
        with self.assertRaises(CommandError) as ctx:
            self._call('predict', checkpoint=str(self.root / 'missing'), dataset=str(self.dataset_path),
                       source_pert='pert_00', target_cell_line='line_1',
                       output=str(self.root / 'bad.tsv'))
        self.assertEqual(ctx.exception.returncode, 5)

    def test_predict_combo_row_label(self):
        """Test that the combo prediction is one row labeled with the sorted names."""
        output = self.root / 'combo' / 'out.tsv'
        self._call('predict_combo', checkpoint=str(self.checkpoint), dataset=str(self.dataset_path),
                   pert_a='pert_03', pert_b='pert_01', cell_line='line_0', output=str(output))
        prediction = load_dataset(output)
        self.assertEqual(len(prediction), 1)
        self.assertEqual(prediction.obs['perturbation'][0], 'pert_01+pert_03')

    def test_predict_combo_same_perturbation_exits_2(self):
        """Test that A = B is a configuration error."""
        with self.assertRaises(CommandError) as ctx:
            self._call('predict_combo', checkpoint=str(self.checkpoint), dataset=str(self.dataset_path),
                       pert_a='pert_01', pert_b='pert_01', cell_line='line_0',
                       output=str(self.root / 'same.tsv'))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_predict_combo_deg_table(self):
        """Test that --actual writes the DEG profile table of the observed dual cells."""
        singles = self.dataset.subset(self.dataset.rows_for(perturbation='pert_01', cell_line='line_0'))
        obs = singles.obs.copy()
        obs['perturbation'] = 'pert_01+pert_03'
        actual_path = self.root / 'dual.tsv'
        save_dataset(ExpressionDataset(gene_ids=singles.gene_ids, obs=obs, values=singles.values), actual_path)
        output = self.root / 'combo_degs' / 'out.tsv'
        stdout = io.StringIO()
        call_command('predict_combo', checkpoint=str(self.checkpoint), dataset=str(self.dataset_path),
                     pert_a='pert_01', pert_b='pert_03', cell_line='line_0', actual=str(actual_path),
                     deg_k=5, output=str(output), stdout=stdout)
        table = pd.read_csv(output.parent / 'out.degs.csv')
        self.assertEqual(list(table.columns), list(DEG_TABLE_COLUMNS))
        self.assertLessEqual(len(table), 5)
        self.assertIn('baseline', stdout.getvalue())

    def test_evaluate_from_checkpoint(self):
        """Test that evaluate --checkpoint predicts on each cell's own line and reports every condition."""
        output = self.root / 'eval_ckpt'
        self._call('evaluate', checkpoint=str(self.checkpoint), actual=str(self.dataset_path), output=str(output))
        frame = pd.read_csv(output / 'report.csv')
        self.assertEqual(len(frame), len(self.dataset.conditions()))
        predictions = load_dataset(output / 'predictions.tsv')
        self.assertEqual(len(predictions), int((~self.dataset.is_control).sum()))

    def test_export_embeddings(self):
        """Test that every cell gets a basal and a perturbation row."""
        output = self.root / 'emb.csv'
        self._call('export_embeddings', checkpoint=str(self.checkpoint), dataset=str(self.dataset_path),
                   output=str(output))
        frame = pd.read_csv(output)
        self.assertEqual(len(frame), 2 * len(self.dataset))
        self.assertEqual(list(frame.columns[:4]), ['cell_id', 'cell_line', 'perturbation', 'role'])
        self.assertEqual(list(frame.columns[4:]), ['z_0', 'z_1', 'z_2'])
        self.assertEqual(set(frame['role']), {'basal', 'perturbation'})

    def test_resolved_config_reruns(self):
        """Test that each command repeats its output from the resolved config alone."""
        actual_path = self.root / 'rerun_dual.tsv'
        singles = self.dataset.subset(self.dataset.rows_for(perturbation='pert_02', cell_line='line_1'))
        obs = singles.obs.copy()
        obs['perturbation'] = 'pert_02+pert_04'
        save_dataset(ExpressionDataset(gene_ids=singles.gene_ids, obs=obs, values=singles.values), actual_path)
        common = {'checkpoint': str(self.checkpoint), 'dataset': str(self.dataset_path)}
        runs = (
            ('predict', 'pred.tsv', dict(source_pert='pert_02', source_cell_line='line_0',
                                         target_cell_line='line_1', log1p=True)),
            ('predict_combo', 'combo.tsv', dict(pert_a='pert_04', pert_b='pert_02', cell_line='line_1',
                                                actual=str(actual_path), deg_k=4)),
            ('export_embeddings', 'emb.csv', {}),
        )
        for name, file_name, options in runs:
            with self.subTest(command=name):
                first = self.root / 'rerun' / 'first' / file_name
                self._call(name, output=str(first), **common, **options)
                config = first.parent / f'{file_name}.resolved_config.json'
                resolved = json.loads(config.read_text(encoding='utf-8'))
                self.assertEqual(resolved['checkpoint'], str(self.checkpoint))
                second = self.root / 'rerun' / 'second' / file_name
                self._call(name, config=str(config), output=str(second))
                self.assertEqual(first.read_bytes(), second.read_bytes())
                self.assertEqual(config.read_bytes(),
                                 (second.parent / f'{file_name}.resolved_config.json').read_bytes())
        self.assertEqual((self.root / 'rerun' / 'first' / 'combo.degs.csv').read_bytes(),
                         (self.root / 'rerun' / 'second' / 'combo.degs.csv').read_bytes())

    def test_missing_required_option_exits_2(self):
        """Test that a required input absent from flags and config names its flag."""
        with self.assertRaises(CommandError) as ctx:
            self._call('predict', checkpoint=str(self.checkpoint), dataset=str(self.dataset_path),
                       source_pert='pert_00', output=str(self.root / 'nowhere.tsv'))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('--target-cell-line', str(ctx.exception))


class ReducedAcceptanceTestCase(SimpleTestCase):
    """
    Test a small noisy synthetic run end to end: train on a holdout split, then score it with evaluate.
    """

    HELD_OUT = ['pert_00', 'pert_05']

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.dataset_path, cls.dataset, _ = write_synthetic(
            cls.root, genes=30, latent=4, perts=8, cell_lines=2, cells_per_condition=10,
            noise_sigma=0.05, seed=1,
        )
        document = small_run_document(cls.dataset_path, encoder_hidden=[16, 8], latent_dim=4,
                                      epochs=3, batch_size=8)
        document['data']['split'] = {'mode': 'holdout', 'test_perturbations': cls.HELD_OUT}
        config_path = cls.root / 'run.json'
        config_path.write_text(json.dumps(document), encoding='utf-8')
        call_command('train', config=str(config_path), output=str(cls.root / 'run'), stdout=io.StringIO())

        held_out = cls.dataset.obs['perturbation'].isin(cls.HELD_OUT + ['control']).to_numpy()
        cls.actual_path = cls.root / 'held_out.tsv'
        save_dataset(cls.dataset.subset(held_out), cls.actual_path)
        cls.output = cls.root / 'eval'
        cls.stdout = io.StringIO()
        call_command('evaluate', checkpoint=str(cls.root / 'run' / 'checkpoints' / 'best'),
                     actual=str(cls.actual_path), output=str(cls.output), stdout=cls.stdout)
        cls.report = json.loads((cls.output / 'report.json').read_text(encoding='utf-8'))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_noisy_data_is_scorable(self):
        """Test that the generated profiles pass evaluation's non-negativity check."""
        self.assertGreaterEqual(float(self.dataset.values.min()), 0.0)
        self.assertTrue((self.root / 'run' / 'test_report.json').exists())

    def test_report_covers_held_out_conditions(self):
        """Test one record per held-out perturbation and cell line."""
        conditions = {(r['cell_line'], r['perturbation']) for r in self.report['records']}
        self.assertEqual(conditions, {(line, pert) for line in ('line_0', 'line_1') for pert in self.HELD_OUT})
        self.assertIn('Conditions: 4', self.stdout.getvalue())

    def test_scores_are_finite(self):
        """Test that model and baseline R2 are finite and at most 1 for every condition."""
        for record in self.report['records']:
            for column in ('r2_all', 'baseline_r2_all'):
                self.assertTrue(np.isfinite(record[column]), column)
                self.assertLessEqual(record[column], 1.0 + 1e-9)

    def test_baseline_matches_control_profile(self):
        """Test that the reported baseline is the control mean scored against the observed mean."""
        for record in self.report['records']:
            line, pert = record['cell_line'], record['perturbation']
            control = self.dataset.values[self.dataset.rows_for(perturbation='control', cell_line=line)]
            observed = self.dataset.values[self.dataset.rows_for(perturbation=pert, cell_line=line)]
            expected = r_squared(control.mean(axis=0), observed.mean(axis=0))
            self.assertAlmostEqual(record['baseline_r2_all'], expected, places=5)


@unittest.skipUnless(RUN_SLOW, 'set XTRANSFER_RUN_SLOW=1 to run the synthetic acceptance runs')
class SyntheticAcceptanceTestCase(SimpleTestCase):
    """
    Test transfer, combination and ablation on the default synthetic benchmark.
    """

    HELD_OUT = ['pert_00', 'pert_05', 'pert_10', 'pert_15']
    SEEDS = (1, 2, 3)

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.dataset_path, cls.dataset, cls.ground_truth = write_synthetic(
            cls.root, genes=200, latent=16, perts=24, cell_lines=2, cells_per_condition=40,
            noise_sigma=0.05, seed=1,
        )
        cls.scores = {}

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def _train(self, seed, ablate=()):
        key = (seed, tuple(ablate))
        if key not in self.scores:
            document = {
                'data': {'dataset_path': str(self.dataset_path),
                         'split': {'mode': 'holdout', 'test_perturbations': self.HELD_OUT}},
            }
            config = load_run_config(document, seed=seed, ablate=ablate)
            name = f"seed{seed}{'-' + '-'.join(ablate) if ablate else ''}"
            self.scores[key] = Trainer(config, self.root / name).run().best
        return self.scores[key]

    def _control(self, line):
        rows = self.dataset.rows_for(perturbation='control', cell_line=line)
        return self.dataset.values[rows].mean(axis=0)

    def _transfer_scores(self, params):
        model, baseline = [], []
        for line in self.ground_truth.cell_line_names:
            control = self._control(line)
            for pert in self.HELD_OUT:
                cells = self.dataset.values[self.dataset.rows_for(perturbation=pert, cell_line=line)]
                target = oracle_profile(self.ground_truth, line, [pert])
                predicted = predict_transfer(params, cells, control[None, :]).mean(axis=0)
                model.append(r_squared(predicted, target))
                baseline.append(r_squared(control, target))
        return float(np.mean(model)), float(np.mean(baseline))

    def test_transfer_beats_baseline(self):
        """Test held-out transfer R2 >= 0.60 and >= baseline + 0.15, median over seeds."""
        results = [self._transfer_scores(self._train(seed)) for seed in self.SEEDS]
        model = np.median([r[0] for r in results])
        baseline = np.median([r[1] for r in results])
        self.assertGreaterEqual(model, 0.60)
        self.assertGreaterEqual(model - baseline, 0.15)

    def test_combination_beats_baseline(self):
        """Test dual predictions for 5 held-out pairs against the additive oracle."""
        pairs = list(combinations(self.HELD_OUT, 2))[:5]
        advantages = []
        for seed in self.SEEDS:
            params = self._train(seed)
            model, baseline = [], []
            for line in self.ground_truth.cell_line_names:
                control = self._control(line)
                for a, b in pairs:
                    cells_a = self.dataset.values[self.dataset.rows_for(perturbation=a, cell_line=line)]
                    cells_b = self.dataset.values[self.dataset.rows_for(perturbation=b, cell_line=line)]
                    target = oracle_profile(self.ground_truth, line, [a, b])
                    predicted = predict_combo_mean(params, cells_a, cells_b, control)[0]
                    model.append(r_squared(predicted, target))
                    baseline.append(r_squared(control, target))
            advantages.append(np.mean(model) - np.mean(baseline))
        self.assertGreaterEqual(np.median(advantages), 0.10)

    def test_cross_ablation_hurts_transfer(self):
        """Test that switching off the cross-transfer term lowers held-out R2 by >= 0.05."""
        full = np.median([self._transfer_scores(self._train(seed))[0] for seed in self.SEEDS])
        ablated = np.median([self._transfer_scores(self._train(seed, ('cross',)))[0] for seed in self.SEEDS])
        self.assertGreaterEqual(full - ablated, 0.05)
