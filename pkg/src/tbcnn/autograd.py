"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the ranking model needs are provided. Feature maps are
laid out as ``(day, slot, location)``; every op on them also accepts one
leading batch axis, so a mini-batch of students runs through a single call.
Batching never mixes samples: each sample's output depends only on that
sample's input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "Tape",
    "affine",
    "broadcast_mul",
    "concat",
    "conv2d_same",
    "depthwise_conv2d_same",
    "flatten",
    "max_over_axis",
    "max_pool2d",
    "mean",
    "mean_over_axes",
    "relu",
    "sigmoid",
    "squeeze_last",
    "take",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that remembers how it was produced.

    Args:
        data: Array-like values; copied to a float64 array.
        requires_grad: Whether gradients should accumulate into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _backward: BackwardFn | None = None, op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # arithmetic -------------------------------------------------------------

    def __add__(self, other) -> Tensor:
        return _add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return _add(self, _neg(_lift(other)))

    def __rsub__(self, other) -> Tensor:
        return _add(_lift(other), _neg(self))

    def __neg__(self) -> Tensor:
        return _neg(self)

    def __mul__(self, other) -> Tensor:
        return _mul(self, _lift(other))

    __rmul__ = __mul__

    def sum(self) -> Tensor:
        return _sum(self)

    def mean(self) -> Tensor:
        return mean(self)

    def backward(self) -> Tape:
        """Backpropagate from this scalar into every ``requires_grad`` leaf.

        Gradients accumulate: call :meth:`zero_grad` on the leaves between
        steps. Returns the tape that was replayed.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        tape = Tape.trace(self)
        tape.replay(self)
        return tape


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = True
    out.grad = None
    out._parents = parents
    out._backward = backward
    out.op = op
    return out


@dataclass
class Tape:
    """Nodes of a computation in topological order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def replay(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # gradient arrays are never written in place, so sharing them is safe
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def _neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def _sum(a: Tensor) -> Tensor:
    return _result(np.array(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    """Mean of all entries, as a scalar tensor."""
    n = a.data.size
    return _result(np.array(a.data.mean()), (a,),
                   lambda g: (np.full(a.shape, float(g) / n),), "mean")


# elementwise ------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        flat = kernels.relu_backward(np.ascontiguousarray(g).reshape(-1), out.reshape(-1))
        return (flat.reshape(out.shape),)

    return _result(out, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# reductions and broadcasting ---------------------------------------------------

def _norm_axes(axes: Iterable[int], ndim: int) -> tuple[int, ...]:
    axes = tuple(axes)
    if not axes:
        raise ValueError("axes must be non-empty")
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} is out of range for a rank-{ndim} tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


_LETTERS = "abcdefgh"


def _sum_keeping(keep: tuple[int, ...], *arrays: np.ndarray) -> np.ndarray:
    """Sum of the elementwise product of ``arrays`` over every axis not in ``keep``."""
    full = _LETTERS[:arrays[0].ndim]
    spec = ",".join([full] * len(arrays)) + "->" + "".join(full[i] for i in keep)
    # one pass, no temporaries; far faster than multiply-then-sum for these shapes
    return np.einsum(spec, *arrays)


def mean_over_axes(x: Tensor, axes: Iterable[int]) -> Tensor:
    """Arithmetic mean over ``axes``; the remaining axes keep their order."""
    ax = _norm_axes(axes, x.ndim)
    count = math.prod(x.shape[a] for a in ax)
    keep = tuple(i for i in range(x.ndim) if i not in ax)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / count, ax), x.shape),)

    return _result(_sum_keeping(keep, x.data) / count, (x,), backward, "mean_over_axes")


def broadcast_mul(feature: Tensor, weights: Tensor, axis: int) -> Tensor:
    """Scale every slice of ``feature`` along ``axis`` by the matching weight.

    ``weights`` is rank-1 with length ``feature.shape[axis]``. When ``feature``
    carries leading batch axes, ``weights`` may carry the same leading axes
    (one weight vector per sample).
    """
    ax = _norm_axes([axis], feature.ndim)[0]
    lead = weights.ndim - 1
    if weights.shape[-1] != feature.shape[ax]:
        raise ValueError(
            f"weights length {weights.shape[-1]} does not match feature axis {ax} "
            f"of length {feature.shape[ax]}")
    if lead and (lead > ax or weights.shape[:-1] != feature.shape[:lead]):
        raise ValueError(
            f"batched weights {weights.shape} incompatible with feature {feature.shape}")
    shape = list(weights.shape[:-1]) + [1] * (feature.ndim - lead)
    shape[ax] = feature.shape[ax]
    wb = weights.data.reshape(shape)
    keep = tuple(range(lead)) + (ax,)

    def backward(g):
        return g * wb, _sum_keeping(keep, g, feature.data)

    return _result(feature.data * wb, (feature, weights), backward, "broadcast_mul")


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    ax = _norm_axes([axis], x.ndim)[0]
    idx = np.expand_dims(x.data.argmax(axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax).squeeze(ax)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _result(out, (x,), backward, "max_over_axis")


def squeeze_excite(x: Tensor, axis: int, w1: Tensor, b1: Tensor,
                   w2: Tensor, b2: Tensor) -> tuple[Tensor, np.ndarray]:
    """Fused ``relu`` followed by squeeze-and-excite recalibration along ``axis``.

    Equivalent to ``h = relu(x)``, ``d = mean(h)`` over the other two trailing
    axes, ``a = sigmoid(affine(relu(affine(d, w1, b1)), w2, b2))`` and
    ``broadcast_mul(h, a, axis)``, with one backward node and two passes over
    the feature map each way. ``axis`` is one of the last three axes of a
    (day, slot, location) map, optionally batched. Returns the output and the
    attention weights (data only).
    """
    xb, single = _as_batch(x, "squeeze_excite input")
    ax = _norm_axes([axis], 3)[0] + 1 if single else _norm_axes([axis], 4)[0]
    if ax == 0:
        raise ValueError("cannot recalibrate along the batch axis")
    B, D, T, C = xb.shape
    L = xb.shape[ax]
    if w1.ndim != 2 or w1.shape[1] != L or b1.shape != (w1.shape[0],):
        raise ValueError(f"first layer {w1.shape}/{b1.shape} does not fit axis length {L}")
    if w2.shape != (L, w1.shape[0]) or b2.shape != (L,):
        raise ValueError(f"second layer {w2.shape}/{b2.shape} does not fit {w1.shape}")
    # view as (B, P, L, Q) with the attended axis in the middle
    view = {1: (B, 1, D, T * C), 2: (B, D, T, C), 3: (B, D * T, C, 1)}[ax]
    h, d = kernels.relu_squeeze(np.ascontiguousarray(xb).reshape(view))
    W1, W2 = w1.data, w2.data
    pre = d @ W1.T + b1.data
    z = np.maximum(pre, 0.0)
    a = sigmoid(Tensor(z @ W2.T + b2.data)).data
    out = (h * a[:, None, :, None]).reshape(x.shape)

    def backward(g):
        gv = np.ascontiguousarray(g).reshape(view)
        ga = kernels.scale_grad(gv, h)
        gs = ga * a * (1.0 - a)
        gz = (gs @ W2) * (pre > 0)
        gd = gz @ W1
        gx = kernels.relu_squeeze_scale_grad(gv, h, a, np.ascontiguousarray(gd))
        return (gx.reshape(x.shape), gz.T @ d, gz.sum(axis=0), gs.T @ z, gs.sum(axis=0))

    res = _result(out, (x, w1, b1, w2, b2), backward, "squeeze_excite")
    return res, (a[0] if single else a)


# dense layers -------------------------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for ``x`` of shape ``(n,)`` or ``(batch, n)``."""
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ValueError(f"weight {weight.shape} and bias {bias.shape} do not form a layer")
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"input width {x.shape[-1]} does not match weight inner dimension {weight.shape[1]}")
    W = weight.data

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        x2 = x.data.reshape(-1, W.shape[1])
        return (g @ W, g2.T @ x2, g2.sum(axis=0))

    return _result(x.data @ W.T + bias.data, (x, weight, bias), backward, "affine")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis`` (the last one by default), preserving order."""
    if not parts:
        raise ValueError("concat needs at least one tensor")
    parts = tuple(parts)
    ax = _norm_axes([axis], parts[0].ndim)[0]
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, backward, "concat")


def flatten(x: Tensor, start: int = 0) -> Tensor:
    """Collapse axes ``start..`` into one."""
    shape = x.shape[:start] + (-1,)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "flatten")


def squeeze_last(x: Tensor) -> Tensor:
    """Drop a trailing axis of length 1."""
    if x.shape[-1:] != (1,):
        raise ValueError(f"last axis must have length 1, got shape {x.shape}")
    return _result(x.data[..., 0], (x,), lambda g: (g[..., None],), "squeeze_last")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = _norm_axes([axis], x.ndim)[0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * ax + (idx,), g)
        return (gx,)

    return _result(np.take(x.data, idx, axis=ax), (x,), backward, "take")


# convolution and pooling ------------------------------------------------------------

def _as_batch(x: Tensor, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ValueError(f"{what} expects a (day, slot, channel) tensor, optionally batched; "
                     f"got shape {x.shape}")


def conv2d_same(x: Tensor, kernels_: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero padding that keeps the spatial shape.

    Args:
        x: ``(D, T, C)`` or ``(batch, D, T, C)``.
        kernels_: ``(C_out, kh, kw, C)`` with odd ``kh`` and ``kw``.
        bias: ``(C_out,)``.
    """
    xb, single = _as_batch(x, "conv2d_same")
    if kernels_.ndim != 4:
        raise ValueError(f"kernels must have shape (C_out, kh, kw, C), got {kernels_.shape}")
    co, kh, kw, c = kernels_.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel height and width must be odd, got {kh}x{kw}")
    if c != xb.shape[-1]:
        raise ValueError(f"kernel input-channel dimension {c} does not match "
                         f"input channel dimension {xb.shape[-1]}")
    if bias.shape != (co,):
        raise ValueError(f"bias shape {bias.shape} does not match output channels {co}")
    xb = np.ascontiguousarray(xb)
    w = np.ascontiguousarray(kernels_.data)
    out, cols = kernels.conv2d_forward(xb, w, bias.data)

    def backward(g):
        gb4 = np.ascontiguousarray(g[None] if single else g)
        # the raw trajectory input needs no gradient; skipping it saves a GEMM
        gx, gw, gbias = kernels.conv2d_backward(cols, xb.shape, w, gb4, x.requires_grad)
        if gx is not None and single:
            gx = gx[0]
        return gx, gw, gbias

    return _result(out[0] if single else out, (x, kernels_, bias), backward, "conv2d_same")


def depthwise_conv2d_same(x: Tensor, kernels_: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 2-D cross-correlation, zero padded, stride 1.

    Args:
        x: ``(D, T, C)`` or ``(batch, D, T, C)``.
        kernels_: ``(C, kh, kw)``, one odd-sized kernel per channel.
        bias: ``(C,)``.
    """
    xb, single = _as_batch(x, "depthwise_conv2d_same")
    if kernels_.ndim != 3:
        raise ValueError(f"kernels must have shape (C, kh, kw), got {kernels_.shape}")
    c, kh, kw = kernels_.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel height and width must be odd, got {kh}x{kw}")
    if c != xb.shape[-1]:
        raise ValueError(f"kernel channel count {c} does not match input channel count "
                         f"{xb.shape[-1]}")
    if bias.shape != (c,):
        raise ValueError(f"bias shape {bias.shape} does not match channel count {c}")
    xb = np.ascontiguousarray(xb)
    w = np.ascontiguousarray(kernels_.data)
    out = kernels.depthwise_forward(xb, w, bias.data)

    def backward(g):
        gb4 = np.ascontiguousarray(g[None] if single else g)
        gx, gw, gbias = kernels.depthwise_backward(xb, w, gb4)
        return (gx[0] if single else gx), gw, gbias

    return _result(out[0] if single else out, (x, kernels_, bias), backward,
                   "depthwise_conv2d_same")


def max_pool2d(x: Tensor, region: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling over (day, slot); trailing remainders are dropped."""
    xb, single = _as_batch(x, "max_pool2d")
    pd, pt = region
    if pd < 1 or pt < 1:
        raise ValueError(f"pooling region must be positive, got {region}")
    if pd > xb.shape[1] or pt > xb.shape[2]:
        raise ValueError(f"pooling region {region} is larger than the input "
                         f"{xb.shape[1]}x{xb.shape[2]}")
    xb = np.ascontiguousarray(xb)
    out, winners = kernels.maxpool2d_forward(xb, pd, pt)

    def backward(g):
        gx = kernels.maxpool2d_backward(np.ascontiguousarray(g), winners, xb.shape)
        return (gx[0] if single else gx,)

    return _result(out[0] if single else out, (x,), backward, "max_pool2d")
