#!/usr/bin/env python3
"""
Test suite for query_selectors.py.
K-center greedy and BALD top-K are compared against brute-force oracles.
"""

import math
import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from sei_fixtures import small_architecture, small_pools
from query_selectors import (CandidateScores, bald_from_probs, bald_scores, kcenter_greedy, select_bald,
                             select_kcenter, select_random)
from sei_network import init_network
from utils import ConfigurationError, NumericalError, SelectionError


def brute_force_kcenter(points, centers, k):
    def cosine_distance(a, b):
        return 1.0 - float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    covered = [c for c in centers]
    picked = []
    for _ in range(k):
        best, best_dist = None, -math.inf
        for i, point in enumerate(points):
            if i in picked:
                continue
            dist = min(cosine_distance(point, c) for c in covered)
            if dist > best_dist:
                best, best_dist = i, dist
        picked.append(best)
        covered.append(points[best])
    return picked


class TestKCenterGreedy(unittest.TestCase):

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            n = int(rng.integers(2, 21))
            k = int(rng.integers(1, min(8, n) + 1))
            dim = int(rng.integers(2, 6))
            points = rng.standard_normal((n, dim))
            centers = rng.standard_normal((int(rng.integers(1, 4)), dim))
            result = kcenter_greedy(points, centers, k)
            self.assertEqual(result.indices, brute_force_kcenter(points, centers, k), f"trial {trial}")

    def test_invariant_under_positive_rescaling(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            points = rng.standard_normal((15, 4))
            centers = rng.standard_normal((3, 4))
            base = kcenter_greedy(points, centers, 5).indices
            self.assertEqual(kcenter_greedy(points * 7.5, centers * 0.2, 5).indices, base)

    def test_first_pick_is_farthest_and_distances_shrink(self):
        centers = np.array([[1.0, 0.0]])
        points = np.array([[1.0, 0.1], [-1.0, 0.0], [0.0, 1.0], [0.1, -1.0]])
        result = kcenter_greedy(points, centers, 3)
        self.assertEqual(result.indices[0], 1)
        self.assertAlmostEqual(result.min_distances[0], 2.0)
        self.assertEqual(result.min_distances, sorted(result.min_distances, reverse=True))

    def test_ties_go_to_lowest_index(self):
        centers = np.array([[1.0, 0.0]])
        points = np.array([[0.0, 1.0], [0.0, -1.0], [0.0, 1.0]])
        self.assertEqual(kcenter_greedy(points, centers, 1).indices, [0])

    def test_budget_and_input_errors(self):
        with self.assertRaises(SelectionError):
            kcenter_greedy(np.ones((2, 2)), np.ones((1, 2)), 3)
        with self.assertRaises(SelectionError):
            kcenter_greedy(np.ones((2, 2)), np.zeros((0, 2)), 1)
        with self.assertRaises(NumericalError):
            kcenter_greedy(np.array([[0.0, 0.0], [1.0, 0.0]]), np.ones((1, 2)), 1)
        self.assertEqual(kcenter_greedy(np.ones((2, 2)), np.ones((1, 2)), 0).indices, [])


class TestBald(unittest.TestCase):

    def test_scores_stay_within_bounds(self):
        rng = np.random.default_rng(2)
        for m in (2, 3, 5):
            scores = bald_from_probs(rng.dirichlet(np.full(m, 0.3), size=(16, 40)))
            self.assertTrue(np.all(scores >= 0.0))
            self.assertTrue(np.all(scores <= math.log(m)))

    def test_agreeing_passes_score_zero(self):
        probs = np.tile(np.array([[0.2, 0.5, 0.3]]), (8, 4, 1))
        np.testing.assert_allclose(bald_from_probs(probs), 0.0, atol=1e-12)

    def test_maximal_disagreement_scores_log_two(self):
        probs = np.array([[[1.0, 0.0]], [[0.0, 1.0]]] * 4)
        np.testing.assert_allclose(bald_from_probs(probs), math.log(2.0))

    def test_top_k_matches_sort_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            k = int(rng.integers(0, n + 1))
            scores = np.round(rng.random(n), 1)
            oracle = sorted(range(n), key=lambda i: (-scores[i], i))[:k]
            self.assertEqual(select_bald(scores, k).indices, oracle)

    def test_network_scores(self):
        pools = small_pools()
        params = init_network(small_architecture(), np.random.default_rng(0))
        a = bald_scores(params, pools.unlabeled, passes=8, rng=np.random.default_rng(1))
        b = bald_scores(params, pools.unlabeled, passes=8, rng=np.random.default_rng(1))
        self.assertEqual(a.shape, (len(pools.unlabeled),))
        np.testing.assert_array_equal(a, b)
        self.assertTrue(np.all((a >= 0.0) & (a <= math.log(3))))
        self.assertEqual(bald_scores(params, [], passes=4).shape, (0,))
        with self.assertRaises(ConfigurationError):
            bald_scores(params, pools.unlabeled, passes=1)

    def test_rejects_wrong_rank(self):
        with self.assertRaises(ConfigurationError):
            bald_from_probs(np.full((4, 2), 0.5))


class TestOtherSelectors(unittest.TestCase):

    def test_random_is_reproducible_and_distinct(self):
        a = select_random(50, 10, seed=4)
        self.assertEqual(a.indices, select_random(50, 10, seed=4).indices)
        self.assertEqual(len(set(a.indices)), 10)
        self.assertTrue(all(0 <= i < 50 for i in a.indices))
        with self.assertRaises(SelectionError):
            select_random(5, 6, seed=0)

    def test_random_covers_pool_across_seeds(self):
        covered = set()
        for seed in range(100):
            covered.update(select_random(40, 8, seed=seed).indices)
        self.assertEqual(covered, set(range(40)))

    def test_network_kcenter(self):
        pools = small_pools()
        params = init_network(small_architecture(), np.random.default_rng(0))
        result = select_kcenter(params, pools.unlabeled, pools.labeled, 4)
        self.assertEqual(len(result.indices), 4)
        self.assertEqual(len(set(result.indices)), 4)
        self.assertTrue(all(0 <= i < len(pools.unlabeled) for i in result.indices))

    def test_duplicate_indices_rejected(self):
        with self.assertRaises(SelectionError):
            CandidateScores(indices=[1, 1], scores=[0.0, 1.0], strategy="bald")

    def test_rows_for_csv(self):
        rows = CandidateScores(indices=[4, 2], scores=[0.5, 0.25], strategy="bald").to_rows(3)
        self.assertEqual(rows, [(3, "bald", 4, 0.5), (3, "bald", 2, 0.25)])


if __name__ == "__main__":
    unittest.main()
