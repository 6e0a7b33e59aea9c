"""Dense float64 arrays with reverse-mode differentiation.

Every value produced by an op is recorded as a node on a :class:`Graph`.
Nodes are appended in evaluation order, so reversing the node list is a
valid reverse-topological order and :func:`backprop` needs no sort.

Batched variants of the layer ops accept a leading batch axis
(``N x C x T`` for :func:`conv1d`, ``N x F`` for :func:`dense`); the
unbatched shapes are handled as a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


BackwardFn = Callable[[np.ndarray, bool], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    backward: Optional[BackwardFn] = None
    name: Optional[str] = None
    needs_grad: bool = True


class Graph:
    """Insertion-ordered record of every op evaluated on its tensors."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.params: Dict[str, int] = {}

    def _add(self, op, inputs, value, backward=None, name=None, needs_grad=None) -> "Tensor":
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by op {op!r}")
        ids = tuple(t.id for t in inputs)
        if needs_grad is None:
            needs_grad = any(self.nodes[i].needs_grad for i in ids)
        self.nodes.append(Node(op, ids, value, backward, name, needs_grad))
        return Tensor(self, len(self.nodes) - 1)

    def input(self, array, name: Optional[str] = None, requires_grad: bool = True) -> "Tensor":
        """Leaf for data; pass ``requires_grad=False`` when its gradient is never read."""
        return self._add("input", (), np.array(array, dtype=np.float64), name=name,
                         needs_grad=requires_grad)

    def param(self, name: str, array) -> "Tensor":
        if name in self.params:
            return Tensor(self, self.params[name])
        t = self._add("param", (), np.asarray(array, dtype=np.float64), name=name, needs_grad=True)
        self.params[name] = t.id
        return t

    def constant(self, array) -> "Tensor":
        return self._add("const", (), np.array(array, dtype=np.float64), needs_grad=False)


class Tensor:
    """Handle to one node of a graph."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: Graph, node_id: int) -> None:
        self.graph = graph
        self.id = node_id

    @property
    def data(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.graph.nodes[self.id].needs_grad

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        node = self.graph.nodes[self.id]
        return f"Tensor(op={node.op}, shape={self.shape})"


class GradientTape:
    """Mapping from node id to the gradient of the seeded output."""

    def __init__(self, graph: Graph, grads: Dict[int, np.ndarray]) -> None:
        self.graph = graph
        self.grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.grads.get(t.id)
        if g is None:
            return np.zeros_like(t.data)
        return g

    def param_grads(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, nid in self.graph.params.items():
            g = self.grads.get(nid)
            out[name] = np.zeros_like(self.graph.nodes[nid].value) if g is None else g
        return out


def _same_graph(*ts: Tensor) -> Graph:
    g = ts[0].graph
    for t in ts[1:]:
        if t.graph is not g:
            raise ValueError("tensors belong to different graphs")
    return g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# layer ops


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation, ``out[o,t] = sum_{c,k} x[c, t*stride+k-padding] w[o,c,k]``."""
    g = _same_graph(x, w)
    xd = x.data
    batched = xd.ndim == 3
    if xd.ndim not in (2, 3) or w.data.ndim != 3:
        raise ValueError(f"conv1d: bad ranks input={xd.shape} kernels={w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv1d: stride must be >= 1 and padding >= 0")
    xb = xd if batched else xd[None]
    n, c_in, length = xb.shape
    c_out, c_w, k = w.shape
    if c_w != c_in:
        raise ValueError(f"conv1d: input has {c_in} channels, kernels expect {c_w}")
    padded_len = length + 2 * padding
    if padded_len < k:
        raise ValueError("conv1d: kernel longer than padded input")
    t_out = (padded_len - k) // stride + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding))) if padding else xb
    span = stride * (t_out - 1) + 1
    wd = w.data
    x_needs = x.requires_grad
    # split the padded input into stride phases so every tap reads a contiguous window
    phases = [np.ascontiguousarray(xp[:, :, p::stride]) for p in range(min(stride, k))]

    def window(j):
        return phases[j % stride][:, :, j // stride:j // stride + t_out]

    # one batched GEMM per kernel tap: out += W[:, :, j] @ x[:, :, j::stride]
    taps = np.ascontiguousarray(wd.transpose(2, 0, 1))
    out = np.matmul(taps[0], window(0))
    for j in range(1, k):
        out += np.matmul(taps[j], window(j))

    def backward(grad, guided):
        gb = grad if batched else grad[None]
        gflat = gb.transpose(1, 0, 2).reshape(c_out, n * t_out)
        gw = np.empty_like(wd)
        for j in range(k):
            xj = window(j).transpose(1, 0, 2).reshape(c_in, n * t_out)
            gw[:, :, j] = gflat @ xj.T
        if not x_needs:
            return None, gw
        gxp = np.zeros_like(xp)
        taps_t = np.ascontiguousarray(taps.transpose(0, 2, 1))
        for j in range(k):
            gxp[:, :, j:j + span:stride] += np.matmul(taps_t[j], gb)
        gx = gxp[:, :, padding:padding + length] if padding else gxp
        return (gx if batched else gx[0]), gw

    return g._add("conv1d", (x, w), out if batched else out[0], backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``w @ x + b`` (rows of a 2-D input are separate samples)."""
    g = _same_graph(x, w, b)
    xd, wd = x.data, w.data
    if wd.ndim != 2 or b.data.shape != (wd.shape[0],) or xd.shape[-1] != wd.shape[1] or xd.ndim > 2:
        raise ValueError(f"dense: shape mismatch input={xd.shape} weights={wd.shape} bias={b.shape}")
    out = xd @ wd.T + b.data

    def backward(grad, guided):
        if xd.ndim == 1:
            return grad @ wd, np.outer(grad, xd), grad
        return grad @ wd, grad.T @ xd, grad.sum(axis=0)

    return g._add("dense", (x, w, b), out, backward)


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., c, t] + b[c]`` for ``C x T`` or ``N x C x T`` inputs."""
    g = _same_graph(x, b)
    if x.data.ndim not in (2, 3) or b.shape != (x.shape[-2],):
        raise ValueError(f"channel_bias: shape mismatch {x.shape} vs {b.shape}")

    def backward(grad, guided):
        axes = tuple(range(grad.ndim - 2)) + (grad.ndim - 1,)
        return grad, grad.sum(axis=axes)

    return g._add("channel_bias", (x, b), x.data + b.data[:, None], backward)


def relu(x: Tensor) -> Tensor:
    g = x.graph
    xd = x.data
    pos = xd > 0

    def backward(grad, guided):
        if guided:
            return (grad * (pos & (grad > 0)),)
        return (grad * pos,)

    return g._add("relu", (x,), xd * pos, backward)


@dataclass
class ICState:
    """Running per-channel statistics of an ic layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "ICState":
        return cls(np.zeros(channels), np.ones(channels))

    def copy(self) -> "ICState":
        return ICState(self.mean.copy(), self.var.copy())


def dropout_mask(shape, rate: float, rng_seed: int) -> np.ndarray:
    if rate == 0:
        return np.ones(shape)
    keep = np.random.default_rng(rng_seed).random(shape) >= rate
    return keep / (1.0 - rate)


def ic_layer(x: Tensor, state: ICState, dropout_rate: float = 0.0, mode: str = "eval",
             rng_seed: int = 0) -> Tensor:
    """Independent-component layer: per-channel standardisation followed by dropout.

    Input is ``C x T`` or ``N x C x T``. In ``train`` mode batch statistics are
    used (over batch and time) and ``state`` is updated in place; in ``eval``
    mode the running statistics are used and no units are dropped.
    """
    if not 0 <= dropout_rate < 1:
        raise ValueError("dropout_rate must lie in [0, 1)")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    g = x.graph
    xd = x.data
    batched = xd.ndim == 3
    xb = xd if batched else xd[None]
    c = xb.shape[1]
    if state.mean.shape != (c,):
        raise ValueError(f"ic_layer: state has {state.mean.shape[0]} channels, input has {c}")

    if mode == "eval":
        inv = 1.0 / np.sqrt(state.var + BN_EPS)
        out = (xb - state.mean[None, :, None]) * inv[None, :, None]

        def backward(grad, guided):
            gb = grad if batched else grad[None]
            gx = gb * inv[None, :, None]
            return (gx if batched else gx[0],)

        return g._add("ic_eval", (x,), out if batched else out[0], backward)

    m = xb.shape[0] * xb.shape[2]
    mu = xb.mean(axis=(0, 2))
    var = xb.var(axis=(0, 2))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xb - mu[None, :, None]) * inv[None, :, None]
    mask = dropout_mask(xb.shape, dropout_rate, rng_seed)
    out = xhat * mask
    unbiased = var * m / max(m - 1, 1)
    state.mean = (1 - BN_MOMENTUM) * state.mean + BN_MOMENTUM * mu
    state.var = (1 - BN_MOMENTUM) * state.var + BN_MOMENTUM * unbiased

    def backward(grad, guided):
        gb = (grad if batched else grad[None]) * mask
        mean_g = gb.mean(axis=(0, 2), keepdims=True)
        mean_gx = (gb * xhat).mean(axis=(0, 2), keepdims=True)
        gx = inv[None, :, None] * (gb - mean_g - xhat * mean_gx)
        return (gx if batched else gx[0],)

    return g._add("ic_train", (x,), out if batched else out[0], backward)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    _check_same_shape(a, b, "add")
    return g._add("add", (a, b), a.data + b.data, lambda grad, guided: (grad, grad))


def sub(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    _check_same_shape(a, b, "sub")
    return g._add("sub", (a, b), a.data - b.data, lambda grad, guided: (grad, -grad))


def mul(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return g._add("mul", (a, b), ad * bd, lambda grad, guided: (grad * bd, grad * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return a.graph._add("scale", (a,), a.data * c, lambda grad, guided: (grad * c,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return a.graph._add("reshape", (a,), a.data.reshape(shape),
                        lambda grad, guided: (grad.reshape(old),))


def upsample(a: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling along the last axis."""
    shape = a.shape

    def backward(grad, guided):
        return (grad.reshape(shape + (factor,)).sum(axis=-1),)

    return a.graph._add("upsample", (a,), np.repeat(a.data, factor, axis=-1), backward)


def time_mean(a: Tensor) -> Tensor:
    """Global average pooling over the last (time) axis."""
    shape = a.shape
    n = shape[-1]

    def backward(grad, guided):
        return (np.broadcast_to(grad[..., None] / n, shape).copy(),)

    return a.graph._add("time_mean", (a,), a.data.mean(axis=-1), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    g = _same_graph(*parts)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(grad, guided):
        return tuple(np.split(grad, splits, axis=axis))

    return g._add("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=axis), backward)


def take(a: Tensor, index) -> Tensor:
    """Select rows along the first axis (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def backward(grad, guided):
        out = np.zeros(shape)
        np.add.at(out, index, grad)
        return (out,)

    return a.graph._add("take", (a,), a.data[index], backward)


def l2_normalize(a: Tensor, eps: float = 1e-24) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    ad = a.data
    norm = np.sqrt((ad * ad).sum(axis=-1, keepdims=True) + eps)
    y = ad / norm

    def backward(grad, guided):
        return ((grad - y * (grad * y).sum(axis=-1, keepdims=True)) / norm,)

    return a.graph._add("l2_normalize", (a,), y, backward)


def row_norm(a: Tensor, eps: float = 1e-24) -> Tensor:
    """Euclidean norm of each row; ``eps`` keeps the gradient finite at zero."""
    ad = a.data
    n = np.sqrt((ad * ad).sum(axis=-1) + eps)

    def backward(grad, guided):
        return (grad[..., None] * ad / n[..., None],)

    return a.graph._add("row_norm", (a,), n, backward)


def mean(a: Tensor) -> Tensor:
    shape = a.shape
    size = a.data.size

    def backward(grad, guided):
        return (np.full(shape, float(grad) / size),)

    return a.graph._add("mean", (a,), np.array(a.data.mean()), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element."""
    g = _same_graph(pred, target)
    _check_same_shape(pred, target, "mse")
    diff = pred.data - target.data
    size = diff.size

    def backward(grad, guided):
        gd = 2.0 * float(grad) * diff / size
        return gd, -gd

    return g._add("mse", (pred, target), np.array((diff * diff).mean()), backward)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    g = _same_graph(*terms)
    w = [float(x) for x in weights]
    value = sum(wi * t.data for wi, t in zip(w, terms))

    def backward(grad, guided):
        return tuple(grad * wi for wi in w)

    return g._add("weighted_sum", tuple(terms), value, backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    ld = logits.data
    single = ld.ndim == 1
    lb = ld[None] if single else ld
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != lb.shape[0]:
        raise ValueError("softmax_cross_entropy: one label per row required")
    if labels.min() < 0 or labels.max() >= lb.shape[1]:
        raise ValueError("softmax_cross_entropy: label out of range")
    lsm = log_softmax(lb)
    n = lb.shape[0]
    loss = -lsm[np.arange(n), labels].mean()

    def backward(grad, guided):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1.0
        gl = float(grad) * p / n
        return (gl[0] if single else gl,)

    return logits.graph._add("softmax_xent", (logits,), np.array(loss), backward)


# ---------------------------------------------------------------------------
# differentiation


def _run_backward(graph: Graph, output: Tensor, seed, guided: bool) -> GradientTape:
    if output.graph is not graph or not 0 <= output.id < len(graph.nodes):
        raise RuntimeError("output node is not part of this graph")
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ValueError(f"seed shape {seed.shape} != output shape {output.shape}")
    grads: Dict[int, np.ndarray] = {output.id: seed.copy()}
    for nid in range(output.id, -1, -1):
        grad = grads.get(nid)
        if grad is None:
            continue
        node = graph.nodes[nid]
        if node.backward is None or not node.needs_grad:
            continue
        in_grads = node.backward(grad, guided)
        for src, gsrc in zip(node.inputs, in_grads):
            if gsrc is None or not graph.nodes[src].needs_grad:
                continue
            if src >= nid:
                raise RuntimeError(f"dangling node reference {src} from node {nid}")
            prev = grads.get(src)
            grads[src] = gsrc if prev is None else prev + gsrc
    return GradientTape(graph, grads)


def backprop(graph: Graph, output: Tensor, seed=None) -> GradientTape:
    """Reverse-mode gradients of ``output`` contracted with ``seed`` (default ones)."""
    if seed is None:
        seed = np.ones(output.shape)
    return _run_backward(graph, output, seed, guided=False)


def guided_backprop_gradients(graph: Graph, output: Tensor, seed=None) -> GradientTape:
    """Like :func:`backprop`, but ReLUs pass only positive gradients at positive inputs."""
    if seed is None:
        seed = np.ones(output.shape)
    return _run_backward(graph, output, seed, guided=True)


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def iter_param_nodes(graph: Graph) -> Iterable[Tuple[str, Tensor]]:
    for name, nid in graph.params.items():
        yield name, Tensor(graph, nid)
