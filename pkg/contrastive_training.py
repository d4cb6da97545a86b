#!/usr/bin/env python3
"""
Stage 1 (self-supervised contrastive pretraining) and stage 2 (supervised
fine-tuning with the weighted joint loss).

Each batch is rotated into two views. The query branch (encoder, projection
head, predictor) is trained by gradient; the key branch (momentum copies of
encoder and projection head) produces gradient-free keys that serve as the
cross-view positives and, after the update, are pushed into the key queue
where later batches use them as negatives.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from emitter_signals import DEFAULT_AUGMENT_ANGLES, IQRecord, network_batch
from numerics import (Tensor, adam_step, add, as_tensor, concat, l2_normalize, log, logsumexp, matmul,
                      mean, mul, pick, reshape, softmax, sum_)
from sei_network import (EMBEDDING_DIM, NetworkParams, as_weights, classifier_forward, collect_grads,
                         encoder_forward, mlp_forward, momentum_update, predict_proba)
from utils import ConfigurationError, NumericalError, write_csv

logger = logging.getLogger(__name__)

DEFAULT_LR = 1e-3
DEFAULT_BATCH_SIZE = 64
DEFAULT_MOMENTUM = 0.99
DEFAULT_QUEUE_DEPTH = 512
DEFAULT_TAU = 0.2
DEFAULT_ALPHA = 0.1
CE_CLAMP = 1e-12
UNIT_NORM_TOL = 1e-9

HISTORY_HEADER = ("epoch", "L_CL", "L_CE", "L", "train_acc")


class KeyQueue:
    """
    FIFO dictionaries of unit-norm key embeddings, one per augmentation view.

    Each entry also remembers the record it was computed from (-1 when
    unknown) so a query can skip stale keys of its own record.
    """

    def __init__(self, depth: int = DEFAULT_QUEUE_DEPTH, dim: int = EMBEDDING_DIM):
        if depth < 1:
            raise ConfigurationError(f"queue depth must be >= 1, got {depth}")
        self.depth = depth
        self.dim = dim
        self.tilde_keys: deque = deque(maxlen=depth)
        self.bar_keys: deque = deque(maxlen=depth)
        self.record_ids: deque = deque(maxlen=depth)

    def __len__(self) -> int:
        return len(self.tilde_keys)

    def enqueue(self, tilde_keys: np.ndarray, bar_keys: np.ndarray,
                record_ids: Optional[Sequence[int]] = None) -> None:
        """Append a batch of keys per view, evicting the oldest beyond `depth`."""
        tilde_keys, bar_keys = np.atleast_2d(tilde_keys), np.atleast_2d(bar_keys)
        if tilde_keys.shape != bar_keys.shape or tilde_keys.shape[1] != self.dim:
            raise ConfigurationError(
                f"queue expects two (N, {self.dim}) key batches, got {tilde_keys.shape} and {bar_keys.shape}")
        for keys in (tilde_keys, bar_keys):
            norms = np.linalg.norm(keys, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise ConfigurationError("queue keys must be unit-norm")
        if record_ids is None:
            record_ids = [-1] * tilde_keys.shape[0]
        elif len(record_ids) != tilde_keys.shape[0]:
            raise ConfigurationError(f"{len(record_ids)} record ids given for {tilde_keys.shape[0]} keys")
        self.tilde_keys.extend(row.copy() for row in tilde_keys)
        self.bar_keys.extend(row.copy() for row in bar_keys)
        self.record_ids.extend(int(i) for i in record_ids)

    def negatives(self, view: str) -> np.ndarray:
        keys = self.tilde_keys if view == "tilde" else self.bar_keys
        return np.array(keys) if keys else np.zeros((0, self.dim))

    def ids(self) -> np.ndarray:
        return np.array(self.record_ids, dtype=np.int64)

    def copy(self) -> "KeyQueue":
        clone = KeyQueue(self.depth, self.dim)
        clone.tilde_keys.extend(k.copy() for k in self.tilde_keys)
        clone.bar_keys.extend(k.copy() for k in self.bar_keys)
        clone.record_ids.extend(self.record_ids)
        return clone


@dataclass
class LossWeights:
    alpha: float = DEFAULT_ALPHA
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0.0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")


@dataclass
class EpochStats:
    epoch: int
    l_cl: float
    l_ce: float
    l_total: float
    train_acc: Optional[float] = None

    def to_row(self) -> Tuple:
        return (self.epoch, self.l_cl, self.l_ce, self.l_total,
                "" if self.train_acc is None else self.train_acc)


def write_history_csv(history: Sequence[EpochStats], path: str) -> None:
    write_csv(path, HISTORY_HEADER, (s.to_row() for s in history))


# --- Losses ---

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise NumericalError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def _unit_rows(keys: np.ndarray) -> np.ndarray:
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    norms = np.linalg.norm(keys, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericalError("zero-norm key embedding")
    return keys / norms


def _info_nce(queries: Tensor, positives: np.ndarray, negatives: np.ndarray, tau: float,
              excluded: Optional[np.ndarray] = None) -> Tensor:
    """Per-sample -log(e^{s+/tau} / (e^{s+/tau} + sum_v e^{s_v/tau})); returns (N,)."""
    n = queries.shape[0]
    positive = reshape(sum_(mul(queries, positives), axis=1), (n, 1))
    logits = positive if negatives.shape[0] == 0 else concat([positive, matmul(queries, negatives.T)], axis=1)
    logits = mul(logits, 1.0 / tau)
    if excluded is not None and excluded.any():
        offsets = np.hstack([np.zeros((n, 1)), np.where(excluded, -np.inf, 0.0)])
        logits = add(logits, offsets)
    return logsumexp(logits, axis=1) - pick(logits, np.zeros(n, dtype=np.int64))


def contrastive_loss(q_tilde: Union[Tensor, np.ndarray], q_bar: Union[Tensor, np.ndarray],
                     k_tilde_pos: np.ndarray, k_bar_pos: np.ndarray,
                     queue: KeyQueue, tau: float = DEFAULT_TAU,
                     query_ids: Optional[Sequence[int]] = None) -> Tensor:
    """
    Symmetric two-view InfoNCE averaged over the batch.

    q~ pairs with the bar-view positive k-bar+ and the bar-view queue; q-bar
    pairs with k~+ and the tilde-view queue. Queries are L2-normalised here;
    keys and queue entries are constants. The positive is part of each
    denominator, so an empty queue gives a loss of exactly 0.

    With `query_ids`, queue entries computed from the same record (id >= 0)
    are left out of that query's denominator.
    """
    q_tilde, q_bar = as_tensor(q_tilde), as_tensor(q_bar)
    if q_tilde.ndim != 2 or q_tilde.shape != q_bar.shape or q_tilde.shape[0] < 1:
        raise ConfigurationError(f"query batches must share a nonempty (N, d) shape, got {q_tilde.shape} and {q_bar.shape}")
    if tau <= 0.0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    if len(queue) == 0:
        logger.warning("Key queue is empty; contrastive loss uses positives-only denominators")
    excluded = None
    if query_ids is not None and len(queue):
        query_ids = np.asarray(query_ids, dtype=np.int64)
        if query_ids.shape != (q_tilde.shape[0],):
            raise ConfigurationError(f"{query_ids.shape[0]} query ids given for {q_tilde.shape[0]} queries")
        excluded = (query_ids[:, None] == queue.ids()[None, :]) & (query_ids[:, None] >= 0)
    first = _info_nce(l2_normalize(q_tilde), _unit_rows(k_bar_pos), queue.negatives("bar"), tau, excluded)
    second = _info_nce(l2_normalize(q_bar), _unit_rows(k_tilde_pos), queue.negatives("tilde"), tau, excluded)
    return mean(first + second)


def cross_entropy_loss(probs: Union[Tensor, np.ndarray], labels: Sequence[int]) -> Tensor:
    """-(1/N) sum_j log p_{j, true}; true-class probabilities are clamped at 1e-12."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ConfigurationError(f"cross entropy expects (N, M) probs and N labels, got {probs.shape} and {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ConfigurationError(f"labels must lie in 0..{probs.shape[1] - 1}, got {sorted(set(labels.tolist()))}")
    p_true = pick(probs, labels)
    clamped = int(np.sum(p_true.data < CE_CLAMP))
    if clamped:
        logger.warning(f"Clamped {clamped} true-class probabilities at {CE_CLAMP:g} in cross entropy")
    return -mean(log(p_true, floor=CE_CLAMP))


def joint_loss(ce, cl, alpha: float):
    """(1 - alpha) * CE + alpha * CL for floats or Tensors."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * ce + alpha * cl


# --- Training loops ---

def _key_embeddings(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Gradient-free key-branch embeddings; key BN runs on batch statistics."""
    z = encoder_forward(as_weights(params.key_encoder), params.key_bn, Tensor(x), params.architecture, True)
    return _unit_rows(mlp_forward(as_weights(params.key_projection), z).data)


def _record_ids(records: Sequence[IQRecord]) -> List[int]:
    return [r.record_id for r in records]


def warm_queue(params: NetworkParams, records: Sequence[IQRecord], queue: KeyQueue, batch_size: int,
               angles: Sequence[float] = DEFAULT_AUGMENT_ANGLES) -> int:
    """
    Fill the queue with key-branch embeddings of up to `queue.depth`
    records, without any parameter update. Returns the number of keys added.
    """
    records = list(records)[:queue.depth]
    added = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        if len(chunk) < 2:
            continue
        queue.enqueue(_key_embeddings(params, network_batch(chunk, angles[0])),
                      _key_embeddings(params, network_batch(chunk, angles[1])), _record_ids(chunk))
        added += len(chunk)
    logger.debug(f"Warmed key queue with {added} keys (depth {queue.depth})")
    return added


def _batches(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(count)
    chunks = [order[i:i + batch_size] for i in range(0, count, batch_size)]
    # A single-record batch has no batch statistics.
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks.pop()
    return chunks


def _apply_updates(params: NetworkParams, weights: Dict[str, Dict[str, Tensor]], lr: float, m: float) -> NetworkParams:
    for name, collection in weights.items():
        new_values, params.adam_state[name] = adam_step(
            params.collection(name), collect_grads(collection), params.adam_state[name], lr, block=name)
        setattr(params, name, new_values)
    return momentum_update(params, m)


def _train_step(params: NetworkParams, records: Sequence[IQRecord], angles: Sequence[float], queue: KeyQueue,
                loss_weights: LossWeights, m: float, lr: float, rng: np.random.Generator,
                supervised: bool, include_contrastive: bool) -> Tuple[NetworkParams, float, float, float]:
    arch = params.architecture
    uses_projection = include_contrastive or arch.classifier_input == "projection"
    names = ["query_encoder"]
    if uses_projection:
        names.append("query_projection")
    if include_contrastive:
        names.append("predictor")
    if supervised:
        names.append("classifier")
    weights = {name: as_weights(params.collection(name), requires_grad=True) for name in names}

    x_tilde = network_batch(records, angles[0])
    z_tilde = encoder_forward(weights["query_encoder"], params.query_bn, Tensor(x_tilde), arch, True)
    p_tilde = mlp_forward(weights["query_projection"], z_tilde) if uses_projection else None

    cl = ce = None
    k_tilde = k_bar = None
    if include_contrastive:
        x_bar = network_batch(records, angles[1])
        z_bar = encoder_forward(weights["query_encoder"], params.query_bn, Tensor(x_bar), arch, True)
        p_bar = mlp_forward(weights["query_projection"], z_bar)
        q_tilde = mlp_forward(weights["predictor"], p_tilde)
        q_bar = mlp_forward(weights["predictor"], p_bar)
        k_tilde = _key_embeddings(params, x_tilde)
        k_bar = _key_embeddings(params, x_bar)
        cl = contrastive_loss(q_tilde, q_bar, k_tilde, k_bar, queue, loss_weights.tau, _record_ids(records))
    if supervised:
        features = p_tilde if arch.classifier_input == "projection" else z_tilde
        logits = classifier_forward(weights["classifier"], features, arch.keep_prob, True, rng)
        ce = cross_entropy_loss(softmax(logits), [r.label for r in records])

    if supervised and include_contrastive:
        loss = joint_loss(ce, cl, loss_weights.alpha)
    else:
        loss = ce if supervised else cl
    loss.backward()

    params = _apply_updates(params, weights, lr, m)
    if include_contrastive:
        queue.enqueue(k_tilde, k_bar, _record_ids(records))
    return (params, cl.item() if cl is not None else math.nan,
            ce.item() if ce is not None else math.nan, loss.item())


def _check_training_args(records: Sequence[IQRecord], epochs: int, batch_size: int, lr: float, m: float) -> None:
    if not records:
        raise ConfigurationError("training pool is empty")
    if epochs < 0 or batch_size < 1 or lr <= 0.0:
        raise ConfigurationError(f"invalid training arguments: epochs={epochs}, batch={batch_size}, lr={lr}")
    if not 0.0 <= m <= 1.0:
        raise ConfigurationError(f"momentum must lie in [0, 1], got {m}")


def pretrain_stage1(params: NetworkParams, unlabeled: Sequence[IQRecord], epochs: int,
                    batch_size: int = DEFAULT_BATCH_SIZE, queue: Optional[KeyQueue] = None,
                    tau: float = DEFAULT_TAU, m: float = DEFAULT_MOMENTUM, lr: float = DEFAULT_LR,
                    rng: Optional[np.random.Generator] = None,
                    angles: Sequence[float] = DEFAULT_AUGMENT_ANGLES) -> Tuple[NetworkParams, List[EpochStats]]:
    """
    Contrastive pretraining of encoder, projection head and predictor on
    unlabeled records. `queue` is updated in place and can be carried into
    stage 2.

    Returns:
        (updated copy of params, per-epoch loss history)
    """
    _check_training_args(unlabeled, epochs, batch_size, lr, m)
    if batch_size > len(unlabeled):
        raise ConfigurationError(f"batch size {batch_size} exceeds unlabeled pool of {len(unlabeled)}")
    queue = queue if queue is not None else KeyQueue()
    rng = rng if rng is not None else np.random.default_rng(0)
    weights = LossWeights(alpha=1.0, tau=tau)
    params = params.copy()
    if epochs > 0 and len(queue) == 0:
        warm_queue(params, unlabeled, queue, batch_size, angles)
    history: List[EpochStats] = []
    for epoch in range(1, epochs + 1):
        losses = []
        for batch in _batches(len(unlabeled), batch_size, rng):
            params, cl, _, _ = _train_step(params, [unlabeled[i] for i in batch], angles, queue, weights,
                                           m, lr, rng, supervised=False, include_contrastive=True)
            losses.append(cl)
        l_cl = float(np.mean(losses))
        history.append(EpochStats(epoch=epoch, l_cl=l_cl, l_ce=math.nan, l_total=l_cl))
        logger.debug(f"stage 1 epoch {epoch}/{epochs}: L_CL={l_cl:.4f} queue={len(queue)}")
    return params, history


def train_stage2(params: NetworkParams, labeled: Sequence[IQRecord], epochs: int,
                 weights: Optional[LossWeights] = None, batch_size: int = DEFAULT_BATCH_SIZE,
                 queue: Optional[KeyQueue] = None, m: float = DEFAULT_MOMENTUM, lr: float = DEFAULT_LR,
                 rng: Optional[np.random.Generator] = None,
                 angles: Sequence[float] = DEFAULT_AUGMENT_ANGLES,
                 include_contrastive: bool = True) -> Tuple[NetworkParams, List[EpochStats]]:
    """
    Supervised fine-tuning with (1 - alpha) * CE + alpha * CL.

    The classifier reads the tilde-view projection, or the latent z when
    the architecture feeds it from the encoder. With
    include_contrastive=False the key branch, predictor and queue are
    skipped and the loss is plain cross entropy. Batches are capped at the
    pool size. train_acc is the eval-mode accuracy on the labeled pool
    after each epoch.
    """
    _check_training_args(labeled, epochs, batch_size, lr, m)
    if any(r.label is None for r in labeled):
        raise ConfigurationError("stage 2 needs labeled records")
    weights = weights if weights is not None else LossWeights()
    queue = queue if queue is not None else KeyQueue()
    rng = rng if rng is not None else np.random.default_rng(0)
    absent = sorted(set(range(params.architecture.num_emitters)) - {r.label for r in labeled})
    if absent:
        logger.warning(f"Emitters {absent} have no labeled records; training proceeds without them")

    labels = np.array([r.label for r in labeled])
    params = params.copy()
    if include_contrastive and epochs > 0 and len(queue) == 0:
        warm_queue(params, labeled, queue, min(batch_size, len(labeled)), angles)
    history: List[EpochStats] = []
    for epoch in range(1, epochs + 1):
        cls, ces, totals = [], [], []
        for batch in _batches(len(labeled), min(batch_size, len(labeled)), rng):
            params, cl, ce, total = _train_step(params, [labeled[i] for i in batch], angles, queue, weights,
                                                m, lr, rng, supervised=True, include_contrastive=include_contrastive)
            cls.append(cl)
            ces.append(ce)
            totals.append(total)
        accuracy = float(np.mean(predict_proba(params, labeled, angles[0]).argmax(axis=1) == labels))
        history.append(EpochStats(epoch=epoch, l_cl=float(np.mean(cls)), l_ce=float(np.mean(ces)),
                                  l_total=float(np.mean(totals)), train_acc=accuracy))
        logger.debug(f"stage 2 epoch {epoch}/{epochs}: L={history[-1].l_total:.4f} acc={accuracy:.3f}")
    return params, history
