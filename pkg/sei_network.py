#!/usr/bin/env python3
"""
The emitter identification network: encoder, projection head, predictor and
classifier, plus the momentum-updated key copies of encoder and projection
head, MC-dropout inference and checkpoint persistence.

Layer plan:
    encoder     3 x [conv1d(k) -> batchnorm -> ReLU -> maxpool(2)], k = 7, 5, 5,
                channels 32, 64, 128, then global average pooling -> z (128)
    projection  dense 256 -> ReLU -> dense 128 -> p
    predictor   dense 256 -> ReLU -> dense 128 -> q
    classifier  dense 128 -> ReLU -> dropout -> dense 64 -> ReLU -> dropout -> dense M
"""

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from emitter_signals import IQRecord, network_batch
from numerics import (AdamState, BatchNormStats, Tensor, batchnorm1d, conv1d, dense, dropout,
                      global_avg_pool, l2_normalize, maxpool1d, relu, softmax)
from utils import CheckpointError, ConfigurationError

EMBEDDING_DIM = 128
MODES = ("train", "eval", "mc_dropout")
TRAINABLE = ("query_encoder", "query_projection", "predictor", "classifier")
COLLECTION_ORDER = ("query_encoder", "key_encoder", "query_projection", "key_projection",
                    "predictor", "classifier")
CLASSIFIER_INPUTS = ("projection", "encoder")
CHECKPOINT_MAGIC = "sei-checkpoint-v1"
INFERENCE_BATCH = 256

Params = Dict[str, np.ndarray]
Weights = Dict[str, Tensor]


@dataclass
class Architecture:
    """Hyperparameters that fix every parameter shape."""

    num_emitters: int
    length: int
    in_channels: int = 2
    kernel_widths: Tuple[int, ...] = (7, 5, 5)
    channels: Tuple[int, ...] = (32, 64, 128)
    pool_window: int = 2
    padding: int = 0
    projection_dims: Tuple[int, ...] = (256, EMBEDDING_DIM)
    predictor_dims: Tuple[int, ...] = (256, EMBEDDING_DIM)
    classifier_hidden: Tuple[int, ...] = (128, 64)
    keep_prob: float = 0.5
    # "encoder" feeds z straight to the classifier (plain CNN)
    classifier_input: str = "projection"

    def __post_init__(self):
        for name in ("kernel_widths", "channels", "projection_dims", "predictor_dims", "classifier_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.num_emitters < 2:
            raise ConfigurationError(f"classifier needs at least 2 emitters, got {self.num_emitters}")
        if len(self.kernel_widths) != len(self.channels):
            raise ConfigurationError(f"{len(self.kernel_widths)} kernel widths for {len(self.channels)} conv blocks")
        if len(self.projection_dims) != 2 or len(self.predictor_dims) != 2 or len(self.classifier_hidden) != 2:
            raise ConfigurationError(
                f"projection, predictor and classifier take two widths each, got {self.projection_dims}, "
                f"{self.predictor_dims} and {self.classifier_hidden}")
        if self.predictor_dims[-1] != self.projection_dims[-1]:
            raise ConfigurationError(
                f"predictor output {self.predictor_dims[-1]} must match projection output {self.projection_dims[-1]}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigurationError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if self.classifier_input not in CLASSIFIER_INPUTS:
            raise ConfigurationError(f"classifier_input must be one of {CLASSIFIER_INPUTS}, got {self.classifier_input!r}")
        if self.encoded_length(self.length) < 1:
            raise ConfigurationError(
                f"record length {self.length} too short for {len(self.channels)} pooled conv blocks; "
                f"minimum is {self.min_length()}")

    @property
    def classifier_width(self) -> int:
        return self.channels[-1] if self.classifier_input == "encoder" else self.projection_dims[-1]

    def encoded_length(self, length: int) -> int:
        for width in self.kernel_widths:
            length = length + 2 * self.padding - width + 1
            if length < self.pool_window:
                return 0
            length = (length - self.pool_window) // self.pool_window + 1
        return length

    def min_length(self) -> int:
        length = 1
        while self.encoded_length(length) < 1:
            length += 1
        return length

    def to_header(self) -> dict:
        return asdict(self)

    @classmethod
    def from_header(cls, header: dict) -> "Architecture":
        return cls(**header)


@dataclass
class NetworkParams:
    """
    All parameter collections of the query and key branches.

    Key collections mirror the query shapes, carry no optimizer state and
    change only through momentum_update().
    """

    architecture: Architecture
    query_encoder: Params
    key_encoder: Params
    query_projection: Params
    key_projection: Params
    predictor: Params
    classifier: Params
    query_bn: List[BatchNormStats] = field(default_factory=list)
    key_bn: List[BatchNormStats] = field(default_factory=list)
    adam_state: Dict[str, AdamState] = field(default_factory=dict)

    def collection(self, name: str) -> Params:
        return getattr(self, name)

    def copy(self) -> "NetworkParams":
        return copy.deepcopy(self)

    def checksum(self, names: Sequence[str] = COLLECTION_ORDER) -> str:
        digest = hashlib.sha256()
        for name in names:
            for key in sorted(self.collection(name)):
                digest.update(key.encode("utf-8"))
                digest.update(np.ascontiguousarray(self.collection(name)[key]).tobytes())
        return digest.hexdigest()

    def reset_optimizer(self) -> None:
        self.adam_state = {name: AdamState.zeros_like(self.collection(name)) for name in TRAINABLE}


def _he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _mlp(rng: np.random.Generator, dims: Sequence[int]) -> Params:
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        params[f"fc{i}.weight"] = _he_uniform(rng, (fan_in, fan_out), fan_in)
        params[f"fc{i}.bias"] = np.zeros(fan_out)
    return params


def init_network(architecture: Architecture, rng: np.random.Generator) -> NetworkParams:
    """Fan-in scaled uniform weights, zero biases, BN scale 1 / shift 0; key branch copies query."""
    encoder: Params = {}
    in_ch = architecture.in_channels
    for i, (width, out_ch) in enumerate(zip(architecture.kernel_widths, architecture.channels), start=1):
        encoder[f"conv{i}.weight"] = _he_uniform(rng, (out_ch, in_ch, width), in_ch * width)
        encoder[f"bn{i}.gamma"] = np.ones(out_ch)
        encoder[f"bn{i}.beta"] = np.zeros(out_ch)
        in_ch = out_ch
    projection = _mlp(rng, (architecture.channels[-1],) + architecture.projection_dims)
    predictor = _mlp(rng, (architecture.projection_dims[-1],) + architecture.predictor_dims)
    classifier = _mlp(rng, (architecture.classifier_width,) + architecture.classifier_hidden
                      + (architecture.num_emitters,))
    query_bn = [BatchNormStats.fresh(ch) for ch in architecture.channels]
    params = NetworkParams(
        architecture=architecture,
        query_encoder=encoder,
        key_encoder={k: v.copy() for k, v in encoder.items()},
        query_projection=projection,
        key_projection={k: v.copy() for k, v in projection.items()},
        predictor=predictor,
        classifier=classifier,
        query_bn=query_bn,
        key_bn=[s.copy() for s in query_bn],
    )
    params.reset_optimizer()
    return params


def as_weights(collection: Params, requires_grad: bool = False) -> Weights:
    return {name: Tensor(value, requires_grad=requires_grad) for name, value in collection.items()}


def collect_grads(weights: Weights) -> Params:
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in weights.items()}


# --- Sub-network forward passes on Tensor weights ---

def encoder_forward(weights: Weights, stats: List[BatchNormStats], x: Tensor,
                    architecture: Architecture, training: bool) -> Tensor:
    if x.ndim != 3 or x.shape[0] == 0:
        raise ConfigurationError(f"encoder expects a nonempty (N, channels, L) batch, got {x.shape}")
    if architecture.encoded_length(x.shape[-1]) < 1:
        raise ConfigurationError(
            f"record length {x.shape[-1]} too short for the encoder; minimum is {architecture.min_length()}")
    h = x
    for i in range(1, len(architecture.channels) + 1):
        h = conv1d(h, weights[f"conv{i}.weight"], padding=architecture.padding)
        h = batchnorm1d(h, weights[f"bn{i}.gamma"], weights[f"bn{i}.beta"], stats[i - 1], training)
        h = maxpool1d(relu(h), architecture.pool_window, architecture.pool_window)
    return global_avg_pool(h)


def mlp_forward(weights: Weights, x: Tensor) -> Tensor:
    """dense -> ReLU -> dense, used by both projection head and predictor."""
    return dense(relu(dense(x, weights["fc1.weight"], weights["fc1.bias"])),
                 weights["fc2.weight"], weights["fc2.bias"])


def classifier_forward(weights: Weights, p: Tensor, keep: float, dropout_active: bool,
                       rng: Optional[np.random.Generator]) -> Tensor:
    """Returns logits; dropout follows the two hidden layers."""
    h = dropout(relu(dense(p, weights["fc1.weight"], weights["fc1.bias"])), keep, rng, dropout_active)
    h = dropout(relu(dense(h, weights["fc2.weight"], weights["fc2.bias"])), keep, rng, dropout_active)
    return dense(h, weights["fc3.weight"], weights["fc3.bias"])


# --- Parameter-level API ---

def _check_mode(mode: str, allowed: Sequence[str]) -> None:
    if mode not in allowed:
        raise ConfigurationError(f"mode must be one of {tuple(allowed)}, got {mode!r}")


def encode(params: NetworkParams, batch: np.ndarray, mode: str = "eval", branch: str = "query") -> np.ndarray:
    """
    Latents z for an (N, 2, L) batch. Train mode uses batch statistics and
    updates the branch's running statistics; eval mode is deterministic.
    """
    _check_mode(mode, ("train", "eval"))
    weights = params.query_encoder if branch == "query" else params.key_encoder
    stats = params.query_bn if branch == "query" else params.key_bn
    z = encoder_forward(as_weights(weights), stats, Tensor(batch), params.architecture, mode == "train")
    return z.data


def project(params: NetworkParams, z: np.ndarray, branch: str = "query") -> np.ndarray:
    weights = params.query_projection if branch == "query" else params.key_projection
    return mlp_forward(as_weights(weights), Tensor(z)).data


def predict(params: NetworkParams, p: np.ndarray, normalize: bool = True) -> np.ndarray:
    q = mlp_forward(as_weights(params.predictor), Tensor(p))
    return l2_normalize(q).data if normalize else q.data


def classify(params: NetworkParams, p: np.ndarray, mode: str = "eval",
             rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Class probabilities (N, M); train and mc_dropout keep dropout active."""
    _check_mode(mode, MODES)
    logits = classifier_forward(as_weights(params.classifier), Tensor(p), params.architecture.keep_prob,
                                mode != "eval", rng)
    return softmax(logits).data


def momentum_update(params: NetworkParams, m: float) -> NetworkParams:
    """key <- m * key + (1 - m) * query for encoder and projection head."""
    if not 0.0 <= m <= 1.0:
        raise ConfigurationError(f"momentum must lie in [0, 1], got {m}")
    updated = copy.copy(params)
    updated.key_encoder = {k: m * v + (1.0 - m) * params.query_encoder[k] for k, v in params.key_encoder.items()}
    updated.key_projection = {k: m * v + (1.0 - m) * params.query_projection[k]
                              for k, v in params.key_projection.items()}
    return updated


def _batched(records: Sequence[IQRecord], size: int):
    for start in range(0, len(records), size):
        yield records[start:start + size]


def embed_records(params: NetworkParams, records: Sequence[IQRecord], theta: float) -> np.ndarray:
    """Eval-mode projections p (N, 128) of the theta-rotated records."""
    if not records:
        return np.zeros((0, params.architecture.projection_dims[-1]))
    chunks = [project(params, encode(params, network_batch(chunk, theta), "eval"))
              for chunk in _batched(records, INFERENCE_BATCH)]
    return np.concatenate(chunks)


def classifier_features(params: NetworkParams, records: Sequence[IQRecord], theta: float) -> np.ndarray:
    """Eval-mode classifier inputs: projections p, or latents z for an encoder-fed classifier."""
    if params.architecture.classifier_input == "projection":
        return embed_records(params, records, theta)
    if not records:
        return np.zeros((0, params.architecture.classifier_width))
    return np.concatenate([encode(params, network_batch(chunk, theta), "eval")
                           for chunk in _batched(records, INFERENCE_BATCH)])


def predict_proba(params: NetworkParams, records: Sequence[IQRecord], theta: float) -> np.ndarray:
    return classify(params, classifier_features(params, records, theta), "eval")


# --- Checkpoints ---

def _checkpoint_layout(params: NetworkParams) -> List[Tuple[str, str, np.ndarray]]:
    layout = []
    for collection in COLLECTION_ORDER:
        for name in sorted(params.collection(collection)):
            layout.append((collection, name, params.collection(collection)[name]))
    for branch in ("query_bn", "key_bn"):
        for i, stats in enumerate(getattr(params, branch), start=1):
            layout.append((branch, f"bn{i}.running_mean", stats.mean))
            layout.append((branch, f"bn{i}.running_var", stats.var))
    return layout


def save_checkpoint(params: NetworkParams, path: str, seed: int, stage: str) -> None:
    """
    Header JSON line (architecture, M, L, seed, stage, tensor index) followed
    by little-endian float64 data in the header's index order. Optimizer
    state is not persisted.
    """
    layout = _checkpoint_layout(params)
    header = {
        "magic": CHECKPOINT_MAGIC,
        "architecture": params.architecture.to_header(),
        "num_emitters": params.architecture.num_emitters,
        "length": params.architecture.length,
        "seed": seed,
        "stage": stage,
        "tensors": [[collection, name, list(array.shape)] for collection, name, array in layout],
    }
    with open(path, "wb") as handle:
        handle.write(json.dumps(header).encode("utf-8") + b"\n")
        for _, _, array in layout:
            handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def load_checkpoint(path: str, expected: Optional[Architecture] = None) -> Tuple[NetworkParams, dict]:
    """Load a checkpoint; refuses files whose architecture differs from `expected`."""
    with open(path, "rb") as handle:
        raw = handle.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint header: {e}") from e
    if not isinstance(header, dict) or header.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        architecture = Architecture.from_header(header["architecture"])
    except (ConfigurationError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed architecture in header: {e}") from e
    if expected is not None and architecture != expected:
        raise CheckpointError(
            f"{path}: architecture mismatch: checkpoint has {architecture.to_header()}, expected {expected.to_header()}")

    params = init_network(architecture, np.random.default_rng(0))
    wanted = {(collection, name): array.shape for collection, name, array in _checkpoint_layout(params)}
    try:
        listed = [(str(collection), str(name), tuple(int(d) for d in shape))
                  for collection, name, shape in header.get("tensors", [])]
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed tensor index: {e}") from e
    if len({(c, n) for c, n, _ in listed}) != len(listed):
        raise CheckpointError(f"{path}: tensor index lists a tensor twice")
    for collection, name, shape in listed:
        if wanted.get((collection, name)) != shape:
            raise CheckpointError(f"{path}: unexpected tensor {collection}.{name} {list(shape)}")
    missing = sorted(f"{c}.{n}" for c, n in set(wanted) - {(c, n) for c, n, _ in listed})
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks {len(missing)} tensors, e.g. {missing[0]}")

    offset = newline + 1
    for collection, name, shape in listed:
        count = int(np.prod(shape)) if shape else 1
        if offset + 8 * count > len(raw):
            raise CheckpointError(f"{path}: truncated data for {collection}.{name}")
        array = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
        if collection in ("query_bn", "key_bn"):
            block, kind = name.split(".")
            stats = getattr(params, collection)[int(block[2:]) - 1]
            if kind == "running_mean":
                stats.mean = array
            else:
                stats.var = array
        else:
            params.collection(collection)[name] = array
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    params.reset_optimizer()
    return params, header
