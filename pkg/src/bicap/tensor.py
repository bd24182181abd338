"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional gradient slot. Each primitive op
records its parents and a closure that pushes the output gradient back to
them; ``backward`` topologically sorts the implicit graph and runs the
closures in reverse. Float32 is the working precision; float64 inputs are
preserved so oracle tests can run in double precision.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

# Additive attention-mask fill. Large enough that exp() underflows to an
# exact 0.0 after max-subtraction, yet finite so arrays stay NaN/Inf-free.
MASK_FILL = -1e9

_grad_enabled = True
_debug_checks = False


class ShapeError(ValueError):
    """Operand shapes violate an op's precondition."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op finiteness checks (slow; for tests and debugging)."""
    global _debug_checks
    _debug_checks = enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward_fn=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        if _debug_checks and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values out of op {op!r}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


@dataclass
class OpRecord:
    op: str
    input_ids: tuple
    output_id: int


@dataclass
class Graph:
    """Topologically ordered trace of the primitives below ``root``.

    ``nodes`` lists every reachable tensor, leaves first, root last; every
    non-leaf appears exactly once with its producing op in ``records``.
    Saved activations live in the nodes' backward closures.
    """

    root: Tensor
    nodes: list

    @property
    def records(self):
        return [
            OpRecord(t.op, tuple(id(p) for p in t.parents), id(t))
            for t in self.nodes
            if t._backward is not None
        ]


def trace(root: Tensor) -> Graph:
    """Build the topologically ordered graph that produced ``root``."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return Graph(root=root, nodes=order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    Gradients add across multiple uses of a tensor and across repeated
    backward calls; call zero_grad between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if graph is None:
        graph = trace(loss)
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add g into t.grad. ``fresh`` marks arrays the caller allocated and
    does not reuse, which may be adopted without a defensive copy."""
    if t.grad is None:
        t.grad = g if fresh and g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad += g


def _make(data, parents, op, backward_fn):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data, requires_grad=False, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _raw(x):
    """Underlying value of a Tensor; scalars pass through unwrapped so
    numpy's weak-scalar promotion keeps float32 graphs in float32."""
    return x.data if isinstance(x, Tensor) else x


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    out_data = _raw(a) + _raw(b)

    def _bw(g):
        if isinstance(a, Tensor) and a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            _accum(a, ga, fresh=ga is not g)
        if isinstance(b, Tensor) and b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            _accum(b, gb, fresh=gb is not g)

    return _make(out_data, [t for t in (a, b) if isinstance(t, Tensor)], "add", _bw)


def sub(a, b):
    return add(a, neg(b) if isinstance(b, Tensor) else np.negative(_raw(b)) if isinstance(b, np.ndarray) else -b)


def neg(a):
    def _bw(g):
        if a.requires_grad:
            _accum(a, -g, fresh=True)

    return _make(-a.data, [a], "neg", _bw)


def mul(a, b):
    out_data = _raw(a) * _raw(b)

    def _bw(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, _unbroadcast(g * _raw(b), a.data.shape), fresh=True)
        if isinstance(b, Tensor) and b.requires_grad:
            _accum(b, _unbroadcast(g * _raw(a), b.data.shape), fresh=True)

    return _make(out_data, [t for t in (a, b) if isinstance(t, Tensor)], "mul", _bw)


def div(a, b):
    if isinstance(b, Tensor):
        return mul(a, power(b, -1.0))
    return mul(a, 1.0 / b)


def power(a, exponent):
    exponent = float(exponent)
    out_data = a.data**exponent

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * exponent * a.data ** (exponent - 1.0), fresh=True)

    return _make(out_data, [a], "power", _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with gradient to both operands.

    Operands must have >= 2 dims; leading batch dims broadcast. The common
    stacked-times-2D case runs as a single flattened GEMM (numpy's batched
    matmul is much slower than one large product).
    """
    ad, bd = np.asarray(_raw(a)), np.asarray(_raw(b))
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {ad.shape} x {bd.shape}")

    if ad.ndim > 2 and bd.ndim == 2:
        a2 = ad.reshape(-1, ad.shape[-1])
        out_data = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))

        def _bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            if isinstance(a, Tensor) and a.requires_grad:
                _accum(a, (g2 @ bd.T).reshape(ad.shape), fresh=True)
            if isinstance(b, Tensor) and b.requires_grad:
                _accum(b, a2.T @ g2, fresh=True)

        return _make(out_data, [t for t in (a, b) if isinstance(t, Tensor)], "matmul", _bw)

    out_data = ad @ bd

    def _bw(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, np.ascontiguousarray(_unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)), fresh=True)
        if isinstance(b, Tensor) and b.requires_grad:
            _accum(b, np.ascontiguousarray(_unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)), fresh=True)

    return _make(out_data, [t for t in (a, b) if isinstance(t, Tensor)], "matmul", _bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def _bw(g):
        if a.requires_grad:
            _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), [a], "transpose", _bw)


def reshape(a: Tensor, shape) -> Tensor:
    def _bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), [a], "reshape", _bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def _bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accum(a, full, fresh=True)

    return _make(a.data[index], [a], "narrow", _bw)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0), fresh=True)

    return _make(out_data, [a], "relu", _bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * out_data, fresh=True)

    return _make(out_data, [a], "exp", _bw)


def log(a: Tensor) -> Tensor:
    def _bw(g):
        if a.requires_grad:
            _accum(a, g / a.data, fresh=True)

    return _make(np.log(a.data), [a], "log", _bw)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g, shape, axes):
    out_shape = [1 if i in axes else s for i, s in enumerate(shape)]
    return g.reshape(out_shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def _bw(g):
        if a.requires_grad:
            if not keepdims:
                g = _expand_reduced(g, a.data.shape, axes)
            _accum(a, np.broadcast_to(g, a.data.shape).copy(), fresh=True)

    return _make(out_data, [a], "sum", _bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[i] for i in axes]))
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def _bw(g):
        if a.requires_grad:
            if not keepdims:
                g = _expand_reduced(g, a.data.shape, axes)
            _accum(a, np.broadcast_to(g / count, a.data.shape).copy(), fresh=True)

    return _make(out_data, [a], "mean", _bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            _accum(a, (g - dot) * out_data, fresh=True)

    return _make(out_data, [a], "softmax", _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.data.shape[-1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeError("gamma/beta must match the normalized extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def _bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, n).sum(axis=0), fresh=True)
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, n).sum(axis=0), fresh=True)
        if x.requires_grad:
            gx_hat = g * gamma.data
            term1 = gx_hat.mean(axis=-1, keepdims=True)
            term2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx_hat - term1 - xhat * term2), fresh=True)

    return _make(out_data, [x, gamma, beta], "layer_norm", _bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup weight[ids]; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise IndexError("embedding id out of range")

    def _bw(g):
        if weight.requires_grad:
            if weight.grad is None:
                weight.grad = np.zeros_like(weight.data)
            np.add.at(weight.grad, ids, g)

    return _make(weight.data[ids], [weight], "embedding", _bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)

    def _bw(g):
        if x.requires_grad:
            _accum(x, g * mask, fresh=True)

    return _make(x.data * mask, [x], "dropout", _bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, NCHW layout, square stride/padding."""
    bsz, cin, h, wd = x.data.shape
    cout, cin2, kh, kw = w.data.shape
    if cin != cin2:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {cin2}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (wd + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # contract (B,Cin,Ho,Wo,kh,kw) with (Cout,Cin,kh,kw) over (Cin,kh,kw)
    out_data = np.ascontiguousarray(np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
    out_data += b.data[None, :, None, None]

    def _bw(g):
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            _accum(w, gw, fresh=True)
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)), fresh=True)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    patch = np.tensordot(g, w.data[:, :, u, v], axes=([1], [0])).transpose(0, 3, 1, 2)
                    gxp[:, :, u : u + stride * hout : stride, v : v + stride * wout : stride] += patch
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + wd]
            _accum(x, gxp, fresh=True)

    return _make(out_data, [x, w, b], "conv2d", _bw)


def cross_entropy_masked(logits: Tensor, targets: np.ndarray, ignore_mask: np.ndarray) -> Tensor:
    """Mean NLL of targets under softmax(logits) over unmasked positions.

    ``logits`` has class scores on the last axis; ``targets`` holds class ids
    for the leading axes; positions where ``ignore_mask`` is True contribute
    exactly zero. Raises if every position is masked.
    """
    targets = np.asarray(targets)
    ignore_mask = np.asarray(ignore_mask, dtype=bool)
    v = logits.data.shape[-1]
    if targets.shape != logits.data.shape[:-1] or ignore_mask.shape != targets.shape:
        raise ShapeError("targets/ignore_mask must match logits leading shape")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("target id out of range")
    counted = ~ignore_mask
    n = int(counted.sum())
    if n == 0:
        raise ValueError("all positions masked")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    nll = (lse - picked) * counted
    out_data = np.asarray(nll.sum() / n, dtype=logits.data.dtype)

    def _bw(g):
        if logits.requires_grad:
            probs = np.exp(shifted - lse[..., None])
            onehot_idx = tuple(np.indices(targets.shape)) + (targets,)
            probs[onehot_idx] -= 1.0
            probs *= (counted * (g / n))[..., None]
            _accum(logits, probs.astype(logits.data.dtype, copy=False), fresh=True)

    return _make(out_data, [logits], "cross_entropy_masked", _bw)
