"""Dense tensors with reverse-mode automatic differentiation.

Everything the detector, the attacks and the CGAN need is here: 1-D
convolution over time (channel-last layout ``(batch, length, channels)``),
non-overlapping max pooling, dense layers, the usual activations, inverted
dropout, binary cross-entropy and a handful of elementwise helpers.

Each op returns a new :class:`Tensor` holding a closure that maps the
gradient of the output to gradients of the inputs. :func:`backward` walks
the traced :class:`Graph` in reverse topological order and writes the
``grad`` slot of every tensor that requires one, inputs included, so
attacks can read ``dJ/dx`` directly.

Data is float32 unless a float64 array is passed in explicitly; the
finite-difference checks run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "forward_op",
    "OP_KINDS",
    "conv1d",
    "maxpool1d",
    "dense",
    "relu",
    "leaky_relu",
    "sigmoid",
    "dropout",
    "flatten",
    "bce_loss",
    "concat",
    "add",
    "mul",
    "tsum",
    "tmean",
    "reshape",
]


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tmean(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# graph + backward


@dataclass
class Graph:
    """Topologically ordered nodes reachable from a scalar loss."""

    nodes: list[Tensor]
    loss: Tensor

    @classmethod
    def trace(cls, loss: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order, loss)


def backward(target: Tensor | Graph) -> None:
    """Populate ``grad`` for every tensor reachable from a scalar loss.

    Gradients overwrite (rather than accumulate into) existing slots, so
    repeated calls on the same inputs give identical results.
    """
    graph = target if isinstance(target, Graph) else Graph.trace(target)
    loss = graph.loss
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# layer ops


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid 1-D cross-correlation. x: (N, L, C), w: (F, C, K), b: (F,)."""
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected x (N,L,C) and w (F,C,K), got {x.shape} and {w.shape}")
    n, length, c = x.shape
    f, wc, k = w.shape
    if wc != c:
        raise ShapeError(f"conv1d: input channels {c} != weight channels {wc}")
    if length < k:
        raise ShapeError(f"conv1d: input length {length} shorter than kernel {k}")
    if b is not None and b.shape != (f,):
        raise ShapeError(f"conv1d: bias shape {b.shape} != ({f},)")
    l_out = (length - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=1)[:, ::stride]
    cols = win.reshape(n * l_out, c * k)
    wmat = w.data.reshape(f, c * k)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, l_out, f)

    def grad_fn(g):
        g2 = g.reshape(n * l_out, f)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, l_out, c, k)
            gx = np.zeros_like(x.data)
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gx[:, j : j + span : stride, :] += dcols[:, :, :, j]
        gw = (g2.T @ cols).reshape(f, c, k) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, "conv1d", parents, grad_fn)


def maxpool1d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the length axis; trailing remainder dropped."""
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d: expected (N,L,C), got {x.shape}")
    n, length, c = x.shape
    l_out = length // size
    if l_out < 1:
        raise ShapeError(f"maxpool1d: input length {length} shorter than pool size {size}")
    blocks = x.data[:, : l_out * size, :].reshape(n, l_out, size, c)
    idx = blocks.argmax(axis=2)
    out = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def grad_fn(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[:, :, None, :], g[:, :, None, :], axis=2)
        gx = np.zeros_like(x.data)
        gx[:, : l_out * size, :] = gb.reshape(n, l_out * size, c)
        return (gx,)

    return _result(np.ascontiguousarray(out), "maxpool1d", (x,), grad_fn)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map. x: (N, D), w: (D, U), b: (U,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: cannot multiply {x.shape} by {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    if b is not None:
        out += b.data

    def grad_fn(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, "dense", parents, grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _result(x.data * scale, "leaky_relu", (x,), lambda g: (g * scale,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, "sigmoid", (x,), lambda g: (g * s * (1 - s),))


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity outside training."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _result(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(x.data.reshape(shape[0], -1), "flatten", (x,), lambda g: (g.reshape(shape),))


def bce_loss(pred: Tensor, target, from_logits: bool = False, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy against 0/1 targets.

    With ``from_logits`` the input is the pre-sigmoid score and the
    log-sum-exp form is used; otherwise ``pred`` is a probability clipped to
    ``[1e-7, 1 - 1e-7]``.
    """
    y = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    if reduction not in ("mean", "sum"):
        raise ValueError(f"bce_loss: unknown reduction {reduction!r}")
    scale = 1.0 / pred.size if reduction == "mean" else 1.0
    z = pred.data
    if from_logits:
        per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        value = per.sum() * scale

        def grad_fn(g):
            # sigmoid(z) - y without cancellation, so confident samples keep a nonzero gradient
            return (((1 - y) * _sigmoid(z) - y * _sigmoid(-z)) * (g * scale),)

    else:
        eps = 1e-7
        p = np.clip(z, eps, 1 - eps)
        per = -(y * np.log(p) + (1 - y) * np.log(1 - p))
        value = per.sum() * scale
        inside = (z > eps) & (z < 1 - eps)

        def grad_fn(g):
            return ((p - y) / (p * (1 - p)) * inside * (g * scale),)

    return _result(np.asarray(value, dtype=z.dtype), "bce_loss", (pred,), grad_fn)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [t.data for t in xs]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[a.shape for a in arrays]} on axis {axis}") from exc
    splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, "concat", tuple(xs), grad_fn)


# --------------------------------------------------------------------------
# elementwise helpers


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    return _result(out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, "mul", (a, b), grad_fn)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), "sum", (x,), grad_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def tmean(x: Tensor) -> Tensor:
    n = x.size
    return _result(np.asarray(x.data.mean()), "mean", (x,), lambda g: (np.full_like(x.data, g / n),))


# --------------------------------------------------------------------------
# dispatch by kind

_DISPATCH = {
    "conv1d": lambda ins, p: conv1d(*ins, stride=p.get("stride", 1)),
    "maxpool1d": lambda ins, p: maxpool1d(ins[0], size=p.get("size", 2)),
    "dense": lambda ins, p: dense(*ins),
    "relu": lambda ins, p: relu(ins[0]),
    "sigmoid": lambda ins, p: sigmoid(ins[0]),
    "dropout": lambda ins, p: dropout(ins[0], p.get("rate", 0.5), p.get("training", False), p.get("rng")),
    "flatten": lambda ins, p: flatten(ins[0]),
    "bce_loss": lambda ins, p: bce_loss(ins[0], p["target"], p.get("from_logits", False), p.get("reduction", "mean")),
    "concat": lambda ins, p: concat(ins, axis=p.get("axis", -1)),
}
OP_KINDS = tuple(_DISPATCH)


def forward_op(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Apply the op named ``kind`` to ``inputs``."""
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {OP_KINDS}") from None
    return fn(list(inputs), params)
