"""
Tests for the network core.
"""
import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from apps.core.exceptions import ConfigurationError, NumericError, ShapeError, UsageError

from .gradcheck import max_relative_error, numerical_gradients
from .layers import LayerSpec, Mode, NetworkSpec, mlp_spec
from .network import backward, forward, init_params
from .optim import OptimizerState, adam_step
from .tensors import cast_params

FD_STEP = 1e-5


class InitParamsTestCase(SimpleTestCase):
    """
    Test deterministic parameter initialization.
    """

    def test_biases_start_at_zero(self):
        """Test that dense biases are initialized to zero."""
        params = init_params(NetworkSpec([LayerSpec.dense(2, 2)]), seed=7)
        np.testing.assert_array_equal(params['0.bias'], [0.0, 0.0])

    def test_same_seed_gives_identical_bytes(self):
        """Test that identical (spec, seed) produce identical weights."""
        spec = NetworkSpec([LayerSpec.dense(2, 2)])
        first = init_params(spec, seed=7)
        second = init_params(spec, seed=7)
        self.assertEqual(first['0.weight'].tobytes(), second['0.weight'].tobytes())

    def test_weights_respect_fan_in_bound(self):
        """Test that |w| <= 1/sqrt(in_dim) for every weight."""
        params = init_params(NetworkSpec([LayerSpec.dense(4, 3)]), seed=0)
        self.assertEqual(params['0.weight'].shape, (3, 4))
        self.assertTrue(np.all(np.abs(params['0.weight']) <= 0.5))

    def test_batchnorm_initial_state(self):
        """Test batchnorm scale, shift and running statistics defaults."""
        params = init_params(mlp_spec(3, [4], 2), seed=1)
        np.testing.assert_array_equal(params['1.gamma'], np.ones(4))
        np.testing.assert_array_equal(params['1.beta'], np.zeros(4))
        np.testing.assert_array_equal(params['1.running_mean'], np.zeros(4))
        np.testing.assert_array_equal(params['1.running_var'], np.ones(4))

    def test_invalid_spec_is_rejected(self):
        """Test that broken dense chaining raises a configuration error."""
        spec = NetworkSpec([LayerSpec.dense(2, 3), LayerSpec.dense(4, 1)])
        with self.assertRaises(ConfigurationError):
            init_params(spec, seed=0)

    def test_dropout_rate_one_is_rejected(self):
        """Test that a dropout rate of 1 is invalid."""
        spec = NetworkSpec([LayerSpec.dense(2, 2), LayerSpec.dropout(1.0)])
        with self.assertRaises(ConfigurationError):
            init_params(spec, seed=0)


class ForwardTestCase(SimpleTestCase):
    """
    Test forward evaluation of each layer kind.
    """

    def test_identity_dense(self):
        """Test that an identity dense layer returns its input."""
        spec = NetworkSpec([LayerSpec.dense(2, 2)])
        params = {'0.weight': np.eye(2, dtype=np.float32), '0.bias': np.zeros(2, dtype=np.float32)}
        y, _ = forward(spec, params, np.array([[1.0, 2.0]], dtype=np.float32))
        np.testing.assert_array_equal(y, [[1.0, 2.0]])

    def test_dense_hand_case(self):
        """Test x W^T + b on a hand-evaluated case."""
        spec = NetworkSpec([LayerSpec.dense(2, 1)])
        params = {
            '0.weight': np.array([[1.0, 1.0]], dtype=np.float32),
            '0.bias': np.array([0.5], dtype=np.float32),
        }
        y, _ = forward(spec, params, np.array([[1.0, 2.0]], dtype=np.float32))
        np.testing.assert_allclose(y, [[3.5]])

    def test_relu(self):
        """Test elementwise max(0, x)."""
        spec = NetworkSpec([LayerSpec.dense(3, 3), LayerSpec.relu()])
        params = {'0.weight': np.eye(3, dtype=np.float32), '0.bias': np.zeros(3, dtype=np.float32)}
        y, _ = forward(spec, params, np.array([[-1.0, 0.0, 2.0]], dtype=np.float32))
        np.testing.assert_array_equal(y, [[0.0, 0.0, 2.0]])

    def test_width_mismatch_raises_shape_error(self):
        """Test that a wrong input width is rejected."""
        spec = NetworkSpec([LayerSpec.dense(2, 2)])
        params = init_params(spec, seed=0)
        with self.assertRaises(ShapeError):
            forward(spec, params, np.zeros((1, 3), dtype=np.float32))

    def test_train_batchnorm_needs_two_rows(self):
        """Test that train-mode batchnorm rejects a batch of one."""
        spec = mlp_spec(3, [4], 2)
        params = init_params(spec, seed=0)
        with self.assertRaises(ShapeError):
            forward(spec, params, np.ones((1, 3), dtype=np.float32), mode=Mode.TRAIN)

    def test_non_finite_output_raises(self):
        """Test that NaN propagating to the output raises a numeric error."""
        spec = NetworkSpec([LayerSpec.dense(2, 2)])
        params = init_params(spec, seed=0)
        with self.assertRaises(NumericError):
            forward(spec, params, np.array([[np.nan, 1.0]], dtype=np.float32))

    def test_batchnorm_train_normalizes_batch(self):
        """Test per-feature mean ~0 and variance ~1 before scale/shift."""
        spec = NetworkSpec([LayerSpec.dense(5, 5), LayerSpec.batchnorm()])
        params = init_params(spec, seed=3)
        x = np.random.default_rng(0).normal(2.0, 3.0, size=(16, 5)).astype(np.float32)
        y, _ = forward(spec, params, x, mode=Mode.TRAIN)
        self.assertTrue(np.all(np.abs(y.mean(axis=0)) <= 1e-4))
        self.assertTrue(np.all(np.abs(y.var(axis=0) - 1.0) <= 1e-3))

    def test_batchnorm_running_statistics_momentum(self):
        """Test new running stats = 0.9 * old + 0.1 * batch."""
        spec = NetworkSpec([LayerSpec.dense(2, 2), LayerSpec.batchnorm()])
        params = {
            '0.weight': np.eye(2, dtype=np.float32), '0.bias': np.zeros(2, dtype=np.float32),
            '1.gamma': np.ones(2, dtype=np.float32), '1.beta': np.zeros(2, dtype=np.float32),
            '1.running_mean': np.zeros(2, dtype=np.float32),
            '1.running_var': np.ones(2, dtype=np.float32),
        }
        x = np.array([[0.0, 2.0], [2.0, 6.0]], dtype=np.float32)
        _, trace = forward(spec, params, x, mode=Mode.TRAIN)
        np.testing.assert_allclose(trace.running['1.running_mean'], [0.1, 0.4], rtol=1e-6)
        np.testing.assert_allclose(trace.running['1.running_var'], [0.9 + 0.1, 0.9 + 0.4], rtol=1e-6)
        # inputs are not mutated
        np.testing.assert_array_equal(params['1.running_mean'], [0.0, 0.0])

    def test_dropout_eval_is_identity(self):
        """Test that dropout does nothing in eval mode."""
        spec = NetworkSpec([LayerSpec.dense(4, 4), LayerSpec.dropout(0.5)])
        params = {'0.weight': np.eye(4, dtype=np.float32), '0.bias': np.zeros(4, dtype=np.float32)}
        x = np.arange(8, dtype=np.float32).reshape(2, 4)
        y, _ = forward(spec, params, x, mode=Mode.EVAL, rng_seed=11)
        np.testing.assert_array_equal(y, x)

    def test_dropout_rate_zero_train_is_identity(self):
        """Test that rate-0 dropout is the identity in train mode."""
        spec = NetworkSpec([LayerSpec.dense(4, 4), LayerSpec.dropout(0.0)])
        params = {'0.weight': np.eye(4, dtype=np.float32), '0.bias': np.zeros(4, dtype=np.float32)}
        x = np.arange(8, dtype=np.float32).reshape(2, 4)
        y, _ = forward(spec, params, x, mode=Mode.TRAIN, rng_seed=11)
        np.testing.assert_array_equal(y, x)

    def test_dropout_scales_survivors(self):
        """Test inverted dropout: survivors are divided by the keep probability."""
        spec = NetworkSpec([LayerSpec.dense(50, 50), LayerSpec.dropout(0.2)])
        params = {'0.weight': np.eye(50, dtype=np.float32), '0.bias': np.zeros(50, dtype=np.float32)}
        x = np.ones((4, 50), dtype=np.float32)
        y, _ = forward(spec, params, x, mode=Mode.TRAIN, rng_seed=5)
        survivors = np.unique(y)
        self.assertTrue(set(np.round(survivors, 5)).issubset({0.0, 1.25}))

    def test_forward_is_deterministic(self):
        """Test bit-identical outputs for identical inputs and seeds."""
        spec = mlp_spec(6, [8, 4], 3, dropout_rate=0.3)
        params = init_params(spec, seed=2)
        x = np.random.default_rng(1).normal(size=(5, 6)).astype(np.float32)
        first, _ = forward(spec, params, x, mode=Mode.TRAIN, rng_seed=9)
        second, _ = forward(spec, params, x, mode=Mode.TRAIN, rng_seed=9)
        self.assertEqual(first.tobytes(), second.tobytes())


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (3, 4), elements=st.floats(-100, 100, width=32)))
def test_relu_is_idempotent(x):
    """ReLU applied twice equals ReLU applied once."""
    spec = NetworkSpec([LayerSpec.dense(4, 4), LayerSpec.relu()])
    params = {'0.weight': np.eye(4, dtype=np.float32), '0.bias': np.zeros(4, dtype=np.float32)}
    once, _ = forward(spec, params, x)
    twice, _ = forward(spec, params, once)
    np.testing.assert_array_equal(once, twice)


class BackwardTestCase(SimpleTestCase):
    """
    Test analytic gradients against hand derivations and finite differences.
    """

    def test_dense_hand_chain_rule(self):
        """Test dW, db and dx of a 1x1 dense layer."""
        spec = NetworkSpec([LayerSpec.dense(1, 1)])
        params = {'0.weight': np.array([[3.0]], dtype=np.float32), '0.bias': np.zeros(1, dtype=np.float32)}
        _, trace = forward(spec, params, np.array([[2.0]], dtype=np.float32), mode=Mode.TRAIN)
        grads = backward(trace, np.array([[1.0]], dtype=np.float32))
        np.testing.assert_allclose(grads.params['0.weight'], [[2.0]])
        np.testing.assert_allclose(grads.params['0.bias'], [1.0])
        np.testing.assert_allclose(grads.input, [[3.0]])

    def test_relu_gradient_gate(self):
        """Test that ReLU blocks gradient where the input was negative."""
        spec = NetworkSpec([LayerSpec.dense(2, 2), LayerSpec.relu()])
        params = {'0.weight': np.eye(2, dtype=np.float32), '0.bias': np.zeros(2, dtype=np.float32)}
        _, trace = forward(spec, params, np.array([[-1.0, 2.0]], dtype=np.float32), mode=Mode.TRAIN)
        grads = backward(trace, np.ones((1, 2), dtype=np.float32))
        np.testing.assert_array_equal(grads.input, [[0.0, 1.0]])

    def test_eval_trace_is_rejected(self):
        """Test that backward refuses an eval-mode trace."""
        spec = NetworkSpec([LayerSpec.dense(2, 2)])
        params = init_params(spec, seed=0)
        _, trace = forward(spec, params, np.ones((2, 2), dtype=np.float32), mode=Mode.EVAL)
        with self.assertRaises(UsageError):
            backward(trace, np.ones((2, 2), dtype=np.float32))

    def test_upstream_shape_is_checked(self):
        """Test that a mis-shaped upstream gradient is rejected."""
        spec = NetworkSpec([LayerSpec.dense(2, 2)])
        params = init_params(spec, seed=0)
        _, trace = forward(spec, params, np.ones((2, 2), dtype=np.float32), mode=Mode.TRAIN)
        with self.assertRaises(ShapeError):
            backward(trace, np.ones((2, 3), dtype=np.float32))

    def test_random_networks_match_finite_differences(self):
        """Test gradients of random 3-layer nets (dims <= 8, no dropout) numerically."""
        rng = np.random.default_rng(2024)
        for trial in range(5):
            dims = rng.integers(2, 9, size=4)
            spec = mlp_spec(int(dims[0]), [int(dims[1]), int(dims[2])], int(dims[3]))
            params = cast_params(init_params(spec, seed=trial), np.float64)
            x = rng.normal(size=(6, int(dims[0])))
            weights = rng.normal(size=(6, int(dims[3])))

            def objective(candidate):
                y, _ = forward(spec, candidate, x, mode=Mode.TRAIN)
                return float(np.sum(y * weights))

            _, trace = forward(spec, params, x, mode=Mode.TRAIN)
            analytic = backward(trace, weights).params
            numeric = numerical_gradients(objective, params, step=FD_STEP)
            errors = max_relative_error(analytic, numeric)
            self.assertLess(max(errors.values()), 1e-3, msg=f"trial {trial}: {errors}")


class AdamTestCase(SimpleTestCase):
    """
    Test the Adam update rule.
    """

    def test_first_step_is_unit_normalized(self):
        """Test that the first bias-corrected step moves by ~lr."""
        params = {'w': np.zeros(1, dtype=np.float32)}
        state = OptimizerState.fresh(params, lr=2e-4)
        new_params, new_state = adam_step(params, {'w': np.ones(1, dtype=np.float32)}, state)
        np.testing.assert_allclose(new_params['w'], [-2e-4], rtol=1e-4)
        self.assertEqual(new_state.step, 1)

    def test_zero_gradient_leaves_params(self):
        """Test that zero gradients from a fresh state change nothing."""
        params = {'w': np.array([0.3, -1.2], dtype=np.float32)}
        state = OptimizerState.fresh(params)
        new_params, _ = adam_step(params, {'w': np.zeros(2, dtype=np.float32)}, state)
        np.testing.assert_array_equal(new_params['w'], params['w'])

    def test_identical_calls_are_identical(self):
        """Test purity: identical inputs give identical outputs."""
        params = {'w': np.array([0.5, 0.25], dtype=np.float32)}
        grads = {'w': np.array([0.1, -0.4], dtype=np.float32)}
        state = OptimizerState.fresh(params)
        first, _ = adam_step(params, grads, state)
        second, _ = adam_step(params, grads, state)
        self.assertEqual(first['w'].tobytes(), second['w'].tobytes())
        np.testing.assert_array_equal(params['w'], [0.5, 0.25])

    def test_running_statistics_are_not_updated(self):
        """Test that batchnorm buffers pass through the optimizer untouched."""
        spec = mlp_spec(3, [4], 2)
        params = init_params(spec, seed=0)
        grads = {key: np.ones_like(value) for key, value in params.items() if 'running' not in key}
        new_params, _ = adam_step(params, grads, OptimizerState.fresh(params))
        np.testing.assert_array_equal(new_params['1.running_var'], params['1.running_var'])
        self.assertFalse(np.array_equal(new_params['0.weight'], params['0.weight']))

    def test_shape_mismatch_raises(self):
        """Test that mis-shaped gradients are rejected."""
        params = {'w': np.zeros(2, dtype=np.float32)}
        with self.assertRaises(ShapeError):
            adam_step(params, {'w': np.zeros(3, dtype=np.float32)}, OptimizerState.fresh(params))
