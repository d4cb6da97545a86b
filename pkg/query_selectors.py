#!/usr/bin/env python3
"""
Active-learning query strategies.

BALD scores each unlabeled record by the disagreement between MC-dropout
passes of the classifier; K-center greedy covers the embedding space with
cosine distance; random selection is the experimental baseline. Ties are
broken by lowest index everywhere so selections are reproducible.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from emitter_signals import IQRecord
from numerics import Tensor, softmax
from sei_network import NetworkParams, as_weights, classifier_features, classifier_forward, embed_records
from utils import ConfigurationError, NumericalError, SelectionError, write_csv

STRATEGIES = ("bald", "kcenter", "random")
DEFAULT_MC_PASSES = 16
SELECTION_HEADER = ("round", "strategy", "index", "score")


@dataclass
class CandidateScores:
    """
    Selected unlabeled-pool indices in pick order.

    `scores` holds the BALD score per index, or the pick order for K-center
    and random selection. `min_distances` records the K-center distance of
    each pick to the covered set at the time it was chosen.
    """

    indices: List[int]
    scores: List[float]
    strategy: str
    min_distances: Optional[List[float]] = field(default=None)

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise SelectionError(f"duplicate indices in {self.strategy} selection")

    def to_rows(self, round_index: int):
        return [(round_index, self.strategy, idx, score) for idx, score in zip(self.indices, self.scores)]


def write_selection_csv(rows: Sequence[Sequence], path: str) -> None:
    write_csv(path, SELECTION_HEADER, rows)


def _check_budget(pool_size: int, k: int) -> None:
    if k < 0:
        raise SelectionError(f"query budget must be non-negative, got {k}")
    if k > pool_size:
        raise SelectionError(f"query budget {k} exceeds unlabeled pool of {pool_size}")


def _entropy(probs: np.ndarray) -> np.ndarray:
    safe = np.where(probs > 0.0, probs, 1.0)
    return -(probs * np.log(safe)).sum(axis=-1)


def bald_from_probs(mc_probs: np.ndarray) -> np.ndarray:
    """
    BALD score per record from a (T, U, M) stack of MC class distributions:
    H(mean_t p_t) - mean_t H(p_t), clipped into [0, log M] against rounding.
    """
    mc_probs = np.asarray(mc_probs, dtype=np.float64)
    if mc_probs.ndim != 3:
        raise ConfigurationError(f"expected (T, U, M) probabilities, got shape {mc_probs.shape}")
    scores = _entropy(mc_probs.mean(axis=0)) - _entropy(mc_probs).mean(axis=0)
    return np.clip(scores, 0.0, np.log(mc_probs.shape[-1]))


def bald_scores(params: NetworkParams, unlabeled: Sequence[IQRecord], passes: int = DEFAULT_MC_PASSES,
                rng: Optional[np.random.Generator] = None, theta: float = 0.5 * np.pi) -> np.ndarray:
    """
    MC-dropout BALD scores. The deterministic eval-mode classifier input is
    computed once per record; the `passes` stochastic classifier replicas
    run on that shared snapshot with independent dropout draws.
    """
    if passes < 2:
        raise ConfigurationError(f"BALD needs at least 2 MC passes, got {passes}")
    if not unlabeled:
        return np.zeros(0)
    rng = rng if rng is not None else np.random.default_rng(0)
    p = classifier_features(params, unlabeled, theta)
    weights = as_weights(params.classifier)
    keep = params.architecture.keep_prob
    replicated = Tensor(np.broadcast_to(p, (passes,) + p.shape).reshape(passes * p.shape[0], p.shape[1]))
    logits = classifier_forward(weights, replicated, keep, True, rng)
    mc_probs = softmax(logits).data.reshape(passes, p.shape[0], -1)
    return bald_from_probs(mc_probs)


def select_bald(scores: Sequence[float], k: int) -> CandidateScores:
    """Top-k scores, ties to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    _check_budget(scores.shape[0], k)
    order = np.lexsort((np.arange(scores.shape[0]), -scores))[:k]
    return CandidateScores(indices=[int(i) for i in order], scores=[float(scores[i]) for i in order],
                           strategy="bald")


def _unit_rows(embeddings: np.ndarray) -> np.ndarray:
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericalError("cosine distance is undefined for zero embeddings")
    return embeddings / norms


def kcenter_greedy(unlabeled: np.ndarray, centers: np.ndarray, k: int) -> CandidateScores:
    """
    Greedy K-center selection with cosine distance d = 1 - cos.

    Each step picks the unlabeled point whose minimum distance to the
    labeled centers and earlier picks is largest (lowest index on ties).
    """
    unlabeled = np.asarray(unlabeled, dtype=np.float64)
    _check_budget(unlabeled.shape[0] if unlabeled.ndim else 0, k)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.size == 0:
        raise SelectionError("K-center greedy needs at least one labeled center")
    if k == 0:
        return CandidateScores(indices=[], scores=[], strategy="kcenter", min_distances=[])
    points = _unit_rows(unlabeled)
    center_units = _unit_rows(centers)
    if center_units.shape[1] != points.shape[1]:
        raise ConfigurationError(f"embedding widths differ: {points.shape} vs {center_units.shape}")

    min_dist = (1.0 - points @ center_units.T).min(axis=1)
    picked: List[int] = []
    distances: List[float] = []
    for _ in range(k):
        candidate = np.where(np.isin(np.arange(points.shape[0]), picked), -np.inf, min_dist)
        choice = int(np.argmax(candidate))
        picked.append(choice)
        distances.append(float(min_dist[choice]))
        min_dist = np.minimum(min_dist, 1.0 - points @ points[choice])
    return CandidateScores(indices=picked, scores=[float(i) for i in range(k)], strategy="kcenter",
                           min_distances=distances)


def select_kcenter(params: NetworkParams, unlabeled: Sequence[IQRecord], labeled: Sequence[IQRecord],
                   k: int, theta: float = 0.5 * np.pi) -> CandidateScores:
    """K-center greedy on eval-mode projection outputs of both pools."""
    _check_budget(len(unlabeled), k)
    return kcenter_greedy(embed_records(params, unlabeled, theta), embed_records(params, labeled, theta), k)


def select_random(pool_size: int, k: int, seed: int) -> CandidateScores:
    """Uniform sample of k distinct indices, reproducible per seed."""
    _check_budget(pool_size, k)
    chosen = np.random.default_rng(seed).choice(pool_size, size=k, replace=False)
    return CandidateScores(indices=[int(i) for i in chosen], scores=[float(i) for i in range(k)],
                           strategy="random")
