#!/usr/bin/env python3
"""
Minimal reverse-mode differentiable tensor core.

Provides exactly the operations the emitter network and its losses need:
1-D convolution, dense layers, ReLU, max-pooling, batch normalisation,
dropout, softmax, L2 normalisation and the handful of reductions used by
the loss functions. Everything is float64. A Graph is derived from an
output tensor by topological sort and drives a single reverse pass.

Also contains the Adam update and a central-difference gradient checker.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils import ConfigurationError, NumericalError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

# Adam defaults; only the learning rate is given for the network.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

GRAD_CHECK_STEP = 1e-5


class Tensor:
    """
    A float64 array plus the information needed to back-propagate through it.

    Leaf tensors are created directly; every op returns a new Tensor whose
    `parents` are its inputs and whose `backward_rule` maps the output
    gradient to one gradient per parent (None for parents that need none).
    Outputs of ops on tensors that do not require gradients carry no graph.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 parents: Tuple["Tensor", ...] = (),
                 backward_rule: Optional[Callable] = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_rule = backward_rule
        self.op = op
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> "Graph":
        """Run the reverse pass from this tensor; returns the graph used."""
        graph = Graph.from_output(self)
        graph.backward(grad)
        return graph

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar used by the losses
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return add(self, neg(as_tensor(other)))
    def __rsub__(self, other): return add(other, neg(self))
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __truediv__(self, other: float): return mul(self, 1.0 / float(other))
    def __matmul__(self, other): return matmul(self, other)


@dataclass
class Graph:
    """Operations reachable from one output, in topological order (inputs first)."""

    output: Tensor
    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(output=output, nodes=order)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Visit each node once in reverse order, accumulating into leaf `.grad`."""
        if not self.output.requires_grad:
            return
        if grad is None:
            if self.output.data.size != 1:
                raise ConfigurationError(
                    f"backward() without an explicit gradient needs a scalar output, got shape {self.output.shape}")
            grad = np.ones_like(self.output.data)
        pending: Dict[int, np.ndarray] = {id(self.output): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self.nodes):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node.backward_rule is None:
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node.parents, node.backward_rule(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], rule: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_rule=rule, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- Elementwise and reductions ---

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def sum_(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), rule, "sum")


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; entries below `floor` are clamped and pass no gradient."""
    clamped = x.data < floor
    safe = np.where(clamped, floor, x.data)
    return _result(np.log(safe), (x,), lambda g: (np.where(clamped, 0.0, g / safe),), "log")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    peak = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (peak + np.log(total)).squeeze(axis)
    weights = shifted / total
    return _result(out, (x,), lambda g: (np.expand_dims(g, axis) * weights,), "logsumexp")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(out, tensors, rule, "concat")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather: out[i] = x[i, index[i]] for a 2-D x."""
    rows = np.arange(x.shape[0])
    index = np.asarray(index, dtype=np.int64)

    def rule(g):
        grad = np.zeros_like(x.data)
        grad[rows, index] = g
        return (grad,)

    return _result(x.data[rows, index], (x,), rule, "pick")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# --- Layers ---

def conv1d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    Valid-mode 1-D cross-correlation.

    Args:
        x: input of shape (channels, length) or (batch, channels, length)
        kernels: (out_channels, channels, width)
        bias: optional (out_channels,)
        stride: step between windows
        padding: zeros added on both ends of the length axis

    Returns:
        Tensor of length floor((length + 2*padding - width) / stride) + 1
    """
    unbatched = x.ndim == 2
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or kernels.ndim != 3:
        raise ConfigurationError(f"conv1d expects (N,C,L) input and (O,C,W) kernels, got {x.shape} and {kernels.shape}")
    n, channels, length = x.shape
    out_channels, k_channels, width = kernels.shape
    if k_channels != channels:
        raise ConfigurationError(f"conv1d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv1d needs stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if width > length + 2 * padding:
        raise ConfigurationError(f"conv1d kernel wider than input: input {x.shape} vs kernels {kernels.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    windows = sliding_window_view(padded, width, axis=2)[:, :, ::stride, :]
    out_len = windows.shape[2]
    cols = windows.transpose(0, 2, 1, 3).reshape(n * out_len, channels * width)
    kmat = kernels.data.reshape(out_channels, channels * width)
    out = (cols @ kmat.T).reshape(n, out_len, out_channels).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def rule(g):
        g2 = g.transpose(0, 2, 1).reshape(n * out_len, out_channels)
        d_kernels = (g2.T @ cols).reshape(kernels.shape)
        d_cols = (g2 @ kmat).reshape(n, out_len, channels, width).transpose(0, 2, 1, 3)
        d_padded = np.zeros_like(padded)
        span = stride * (out_len - 1) + 1
        for k in range(width):
            d_padded[:, :, k:k + span:stride] += d_cols[:, :, :, k]
        d_x = d_padded[:, :, padding:padding + length] if padding else d_padded
        grads = (d_x, d_kernels)
        return grads + ((g.sum(axis=(0, 2)),) if bias is not None else ())

    parents = (x, kernels) + ((bias,) if bias is not None else ())
    out_tensor = _result(out, parents, rule, "conv1d")
    return reshape(out_tensor, out_tensor.shape[1:]) if unbatched else out_tensor


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weights + bias with weights shaped (in, out)."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ConfigurationError(
            f"dense shape mismatch: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    unbatched = x.ndim == 1
    x2 = x.data[None, :] if unbatched else x.data
    out = x2 @ weights.data + bias.data

    def rule(g):
        g2 = g[None, :] if unbatched else g
        d_x = g2 @ weights.data.T
        return (d_x[0] if unbatched else d_x, x2.T @ g2, g2.sum(axis=0))

    return _result(out[0] if unbatched else out, (x, weights, bias), rule, "dense")


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _result(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,), "relu")


def maxpool1d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max over sliding windows of the last axis of an (N, C, L) tensor."""
    if x.shape[-1] < window:
        raise ConfigurationError(f"maxpool1d window {window} exceeds input length {x.shape[-1]}")
    windows = sliding_window_view(x.data, window, axis=-1)[..., ::stride, :]
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    out_len = out.shape[-1]

    def rule(g):
        # flat rows are built contiguous; x.data may be a transposed view
        rows = x.data.size // x.shape[-1]
        grad = np.zeros((rows, x.shape[-1]))
        positions = arg + stride * np.arange(out_len)
        np.add.at(grad, (np.repeat(np.arange(rows), out_len), positions.reshape(-1)), np.asarray(g).reshape(-1))
        return (grad.reshape(x.shape),)

    return _result(out, (x,), rule, "maxpool1d")


@dataclass
class BatchNormStats:
    """Running per-channel statistics used in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormStats":
        return cls(mean=np.zeros(channels), var=np.ones(channels))

    def copy(self) -> "BatchNormStats":
        return BatchNormStats(self.mean.copy(), self.var.copy())


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
                training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """
    Per-channel batch normalisation of (N, C) or (N, C, L) input.

    Training mode normalises with batch statistics and updates `stats` in
    place; eval mode normalises with `stats` and leaves them untouched.
    """
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    count = int(np.prod([x.shape[a] for a in axes]))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        stats.mean = (1.0 - momentum) * stats.mean + momentum * mu
        stats.var = (1.0 - momentum) * stats.var + momentum * unbiased
    else:
        mu, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = x_hat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def rule(g):
        d_gamma = (g * x_hat).sum(axis=axes)
        d_beta = g.sum(axis=axes)
        d_hat = g * gamma.data.reshape(bshape)
        if training:
            d_x = (inv_std.reshape(bshape) / count) * (
                count * d_hat
                - d_hat.sum(axis=axes, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True))
        else:
            d_x = d_hat * inv_std.reshape(bshape)
        return d_x, d_gamma, d_beta

    return _result(out, (x, gamma, beta), rule, "batchnorm1d")


def dropout(x: Tensor, keep: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: zero with probability 1-keep, rescale survivors by 1/keep."""
    if not 0.0 < keep <= 1.0:
        raise ConfigurationError(f"dropout keep-probability must lie in (0, 1], got {keep}")
    if not training or keep == 1.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an explicit random generator")
    mask = (rng.random(x.shape) < keep) / keep
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    probs = shifted / shifted.sum(axis=axis, keepdims=True)
    return _result(probs, (x,),
                   lambda g: (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),), "softmax")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.maximum(np.linalg.norm(x.data, axis=axis, keepdims=True), eps)
    unit = x.data / norm
    return _result(unit, (x,),
                   lambda g: ((g - unit * (g * unit).sum(axis=axis, keepdims=True)) / norm,), "l2_normalize")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, L) -> (N, C) by averaging over the length axis."""
    return mean(x, axis=-1)


# --- Optimiser ---

@dataclass
class AdamState:
    """First/second moment estimates for one parameter collection."""

    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls(step=0,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, block: str = "params", beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One Adam update of a parameter collection.

    Args:
        params: named parameter arrays
        grads: gradients with the same names/shapes; missing names count as zero
        state: moment estimates for this collection
        lr: learning rate
        block: collection name used in diagnostics

    Returns:
        (new params, new state); inputs are not modified.

    Raises:
        NumericalError: any gradient entry is NaN or infinite
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
            raise NumericalError(f"non-finite gradient in {block}.{name}: {bad} bad entries of shape {np.shape(grad)}")
    for name, param in params.items():
        if name in state.m and state.m[name].shape != param.shape:
            raise ConfigurationError(
                f"Adam state shape {state.m[name].shape} does not match {block}.{name} {param.shape}")

    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        m = beta1 * state.m[name] + (1.0 - beta1) * grad
        v = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        new_params[name] = param - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=step, m=new_m, v=new_v)


# --- Finite-difference verification ---

@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: Dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def failures(self) -> List[str]:
        return [name for name, err in self.errors.items() if err >= self.tolerance]


def _scalarize(out: Tensor, weights: Optional[np.ndarray]) -> Tensor:
    return out if weights is None else sum_(mul(out, weights))


def grad_check(op: Callable[..., Tensor], point: Dict[str, np.ndarray],
               tolerance: float = 1e-4, step: float = GRAD_CHECK_STEP) -> GradCheckReport:
    """
    Compare reverse-mode gradients of `op` with central differences.

    `op` receives one Tensor keyword argument per entry of `point` and must
    rebuild its graph on every call (any randomness inside must be
    re-seeded per call). Non-scalar outputs are contracted with fixed
    random weights. The error per input is ||a - n|| / (||a|| + ||n||).
    """
    sample = op(**{k: Tensor(v) for k, v in point.items()})
    weights = None if sample.data.size == 1 else np.random.default_rng(0).standard_normal(sample.shape)

    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in point.items()}
    _scalarize(op(**leaves), weights).backward()

    def evaluate(name: str, value: np.ndarray) -> float:
        args = {k: Tensor(value if k == name else v) for k, v in point.items()}
        return _scalarize(op(**args), weights).item()

    errors = {}
    for name, base in point.items():
        base = np.array(base, dtype=np.float64)
        analytic = leaves[name].grad if leaves[name].grad is not None else np.zeros_like(base)
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            numeric[idx] = (evaluate(name, plus) - evaluate(name, minus)) / (2.0 * step)
        denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        errors[name] = 0.0 if denom == 0.0 else float(np.linalg.norm(analytic - numeric) / denom)
    return GradCheckReport(max_rel_error=max(errors.values(), default=0.0), errors=errors, tolerance=tolerance)
