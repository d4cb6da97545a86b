#!/usr/bin/env python3
"""
Test suite for numerics.py.
Central-difference checks for every differentiable op plus the layer,
optimizer and graph behaviour the network relies on.
"""

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from numerics import (AdamState, BatchNormStats, Graph, Tensor, adam_step, add, batchnorm1d, concat, conv1d, dense,
                      dropout, global_avg_pool, grad_check, l2_normalize, log, logsumexp, matmul, maxpool1d, mean,
                      mul, pick, relu, reshape, softmax, sum_)
from utils import ConfigurationError, NumericalError

POINTS = 20


def _away_from_zero(rng, shape, margin=0.1):
    u = rng.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))


def _distinct(rng, shape):
    """Values with gaps of at least 0.01 so max-pooling has no near ties."""
    values = rng.permutation(int(np.prod(shape))).astype(np.float64) * 0.01
    return values.reshape(shape) + 0.001 * rng.random(shape)


class TestGradientChecks(unittest.TestCase):
    """Reverse-mode gradients agree with central differences at 20 random points per op."""

    def _check(self, op, make_point):
        for seed in range(POINTS):
            point = make_point(np.random.default_rng(seed))
            report = grad_check(op, point)
            self.assertTrue(report.passed, f"seed {seed}: errors {report.errors}")

    def test_add_and_mul_with_broadcasting(self):
        self._check(lambda a, b: mul(add(a, b), a),
                    lambda rng: {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((1, 4))})

    def test_matmul(self):
        self._check(lambda a, b: matmul(a, b),
                    lambda rng: {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))})

    def test_reductions(self):
        self._check(lambda x: add(sum_(x, axis=1), mean(x, axis=1)), lambda rng: {"x": rng.standard_normal((3, 5))})
        self._check(lambda x: sum_(x, axis=0, keepdims=True), lambda rng: {"x": rng.standard_normal((3, 5))})

    def test_log(self):
        self._check(lambda x: log(x), lambda rng: {"x": 0.5 + rng.random((2, 3))})

    def test_logsumexp(self):
        self._check(lambda x: logsumexp(x, axis=1), lambda rng: {"x": rng.standard_normal((3, 5))})

    def test_concat_pick_reshape(self):
        index = np.array([2, 0, 4])
        self._check(lambda a, b: pick(reshape(concat([a, b], axis=1), (3, 5)), index),
                    lambda rng: {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal((3, 3))})

    def test_conv1d(self):
        self._check(lambda x, k, b: conv1d(x, k, b),
                    lambda rng: {"x": rng.standard_normal((2, 2, 9)), "k": rng.standard_normal((3, 2, 3)),
                                 "b": rng.standard_normal(3)})

    def test_conv1d_stride_and_padding(self):
        self._check(lambda x, k: conv1d(x, k, stride=2, padding=1),
                    lambda rng: {"x": rng.standard_normal((2, 2, 8)), "k": rng.standard_normal((2, 2, 3))})

    def test_dense(self):
        self._check(lambda x, w, b: dense(x, w, b),
                    lambda rng: {"x": rng.standard_normal((4, 3)), "w": rng.standard_normal((3, 2)),
                                 "b": rng.standard_normal(2)})

    def test_relu(self):
        self._check(lambda x: relu(x), lambda rng: {"x": _away_from_zero(rng, (3, 4))})

    def test_maxpool1d(self):
        self._check(lambda x: maxpool1d(x, 2, 2), lambda rng: {"x": _distinct(rng, (2, 3, 8))})

    def test_maxpool1d_on_transposed_view(self):
        base = _distinct(np.random.default_rng(0), (2, 8, 3))
        view = Tensor(base.transpose(0, 2, 1), requires_grad=True)
        copy = Tensor(np.ascontiguousarray(base.transpose(0, 2, 1)), requires_grad=True)
        sum_(maxpool1d(view, 2, 2)).backward()
        sum_(maxpool1d(copy, 2, 2)).backward()
        self.assertEqual(view.grad.shape, (2, 3, 8))
        self.assertEqual(float(view.grad.sum()), 2 * 3 * 4)
        np.testing.assert_array_equal(view.grad, copy.grad)

    def test_encoder_block_chain(self):
        def block(x, k, g, b, w, c):
            h = conv1d(x, k)
            h = relu(batchnorm1d(h, g, b, BatchNormStats.fresh(4), training=True))
            return dense(global_avg_pool(maxpool1d(h, 2, 2)), w, c)

        self._check(block, lambda rng: {
            "x": rng.standard_normal((3, 2, 12)), "k": rng.standard_normal((4, 2, 3)),
            "g": 1.0 + 0.1 * rng.standard_normal(4), "b": rng.standard_normal(4),
            "w": rng.standard_normal((4, 2)), "c": rng.standard_normal(2)})

    def test_batchnorm_training(self):
        self._check(lambda x, g, b: batchnorm1d(x, g, b, BatchNormStats.fresh(3), training=True),
                    lambda rng: {"x": rng.standard_normal((4, 3, 5)), "g": 1.0 + 0.1 * rng.standard_normal(3),
                                 "b": rng.standard_normal(3)})

    def test_batchnorm_eval(self):
        stats = BatchNormStats(mean=np.array([0.1, -0.2]), var=np.array([0.5, 2.0]))
        self._check(lambda x, g, b: batchnorm1d(x, g, b, stats, training=False),
                    lambda rng: {"x": rng.standard_normal((3, 2)), "g": rng.standard_normal(2),
                                 "b": rng.standard_normal(2)})

    def test_dropout_with_fixed_mask(self):
        self._check(lambda x: dropout(x, 0.6, np.random.default_rng(11), True),
                    lambda rng: {"x": rng.standard_normal((4, 6))})

    def test_softmax(self):
        self._check(lambda x: softmax(x), lambda rng: {"x": rng.standard_normal((3, 4))})

    def test_l2_normalize(self):
        self._check(lambda x: l2_normalize(x), lambda rng: {"x": _away_from_zero(rng, (3, 4))})

    def test_global_avg_pool(self):
        self._check(lambda x: global_avg_pool(x), lambda rng: {"x": rng.standard_normal((2, 3, 5))})


class TestTensorAndGraph(unittest.TestCase):

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        y = mul(x, x)
        graph = sum_(add(y, y)).backward()
        np.testing.assert_allclose(x.grad, 4.0 * x.data)
        self.assertEqual(graph.nodes[-1].op, "sum")
        self.assertIs(graph.nodes[0], x)

    def test_topological_order_places_inputs_first(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        out = sum_(mul(add(a, b), b))
        graph = Graph.from_output(out)
        positions = {id(node): i for i, node in enumerate(graph.nodes)}
        for node in graph.nodes:
            for parent in node.parents:
                if parent.requires_grad:
                    self.assertLess(positions[id(parent)], positions[id(node)])

    def test_non_scalar_backward_requires_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(ConfigurationError):
            mul(x, 2.0).backward()

    def test_constants_carry_no_graph(self):
        out = add(Tensor(np.ones(2)), 1.0)
        self.assertFalse(out.requires_grad)
        self.assertEqual(out.parents, ())

    def test_log_clamp_blocks_gradient(self):
        x = Tensor(np.array([0.0, 0.5]), requires_grad=True)
        sum_(log(x, floor=1e-12)).backward()
        self.assertEqual(x.grad[0], 0.0)
        self.assertAlmostEqual(x.grad[1], 2.0)


class TestLayers(unittest.TestCase):

    def test_conv1d_output_length(self):
        x = Tensor(np.zeros((1, 2, 20)))
        k = Tensor(np.zeros((4, 2, 5)))
        self.assertEqual(conv1d(x, k).shape, (1, 4, 16))
        self.assertEqual(conv1d(x, k, stride=3, padding=2).shape, (1, 4, 7))
        self.assertEqual(conv1d(Tensor(np.zeros((2, 20))), k).shape, (4, 16))

    def test_conv1d_matches_numpy_correlate(self):
        rng = np.random.default_rng(0)
        x, k = rng.standard_normal(12), rng.standard_normal(4)
        out = conv1d(Tensor(x[None, None, :]), Tensor(k[None, None, :])).data[0, 0]
        np.testing.assert_allclose(out, np.correlate(x, k, mode="valid"))

    def test_conv1d_shape_mismatch_names_shapes(self):
        with self.assertRaises(ConfigurationError) as ctx:
            conv1d(Tensor(np.zeros((1, 3, 10))), Tensor(np.zeros((2, 2, 3))))
        self.assertIn("(1, 3, 10)", str(ctx.exception))
        self.assertIn("(2, 2, 3)", str(ctx.exception))

    def test_dense_shape_mismatch(self):
        with self.assertRaises(ConfigurationError):
            dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))

    def test_softmax_rows_sum_to_one_for_large_logits(self):
        probs = softmax(Tensor(np.array([[1000.0, 0.0, -1000.0], [5.0, 5.0, 5.0]]))).data
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        np.testing.assert_allclose(probs[1], 1.0 / 3.0)
        self.assertTrue(np.all(np.isfinite(probs)))

    def test_batchnorm_train_updates_stats_eval_does_not(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((8, 2, 6)) * 3.0 + 1.0)
        gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
        stats = BatchNormStats.fresh(2)
        out = batchnorm1d(x, gamma, beta, stats, training=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2)), 0.0, atol=1e-12)
        self.assertFalse(np.allclose(stats.mean, 0.0))
        frozen = stats.copy()
        batchnorm1d(x, gamma, beta, stats, training=False)
        np.testing.assert_array_equal(stats.mean, frozen.mean)
        np.testing.assert_array_equal(stats.var, frozen.var)

    def test_dropout_identity_outside_training(self):
        x = Tensor(np.arange(6.0))
        self.assertIs(dropout(x, 0.5, None, training=False), x)
        self.assertIs(dropout(x, 1.0, None, training=True), x)

    def test_dropout_rescales_survivors(self):
        x = Tensor(np.ones(10000))
        out = dropout(x, 0.25, np.random.default_rng(0), training=True).data
        self.assertTrue(set(np.unique(out)) <= {0.0, 4.0})
        self.assertAlmostEqual(out.mean(), 1.0, delta=0.1)

    def test_dropout_rejects_bad_keep_probability(self):
        for keep in (0.0, -0.1, 1.5):
            with self.assertRaises(ConfigurationError):
                dropout(Tensor(np.ones(3)), keep, np.random.default_rng(0), True)

    def test_maxpool_rejects_short_input(self):
        with self.assertRaises(ConfigurationError):
            maxpool1d(Tensor(np.ones((1, 1, 1))), 2, 2)


class TestAdam(unittest.TestCase):

    def test_first_step_moves_by_learning_rate(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        grads = {"w": np.array([0.5, -4.0, 1e-3])}
        new, state = adam_step(params, grads, AdamState.zeros_like(params), lr=0.01)
        # Bias-corrected first step is lr * sign(g) up to eps.
        np.testing.assert_allclose(new["w"], params["w"] - 0.01 * np.sign(grads["w"]), atol=1e-6)
        self.assertEqual(state.step, 1)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0, 3.0])

    def test_zero_gradient_leaves_params_unchanged(self):
        params = {"w": np.array([0.3, 0.7])}
        new, _ = adam_step(params, {}, AdamState.zeros_like(params), lr=0.1)
        np.testing.assert_array_equal(new["w"], params["w"])

    def test_non_finite_gradient_names_block(self):
        params = {"w": np.zeros(2)}
        with self.assertRaises(NumericalError) as ctx:
            adam_step(params, {"w": np.array([np.nan, 1.0])}, AdamState.zeros_like(params), 0.1, block="classifier")
        self.assertIn("classifier.w", str(ctx.exception))

    def test_minimises_quadratic(self):
        params = {"w": np.array([5.0, -3.0])}
        state = AdamState.zeros_like(params)
        for _ in range(2000):
            params, state = adam_step(params, {"w": 2.0 * params["w"]}, state, lr=0.05)
        np.testing.assert_allclose(params["w"], 0.0, atol=0.05)


if __name__ == "__main__":
    unittest.main()
