"""Differentiable operations.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per parent.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from relchain.autodiff.tensor import ShapeError, Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_result(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return make_result(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions of either side broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(out, (a, b), back, "matmul")


# -- elementwise unary ----------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


# -- shape ----------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return make_result(out, (x,), back, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: nothing to concatenate")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), back, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeError(f"stack: mismatched shapes {[t.shape for t in ts]}")
    ax = axis % (ts[0].ndim + 1)

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return make_result(np.stack([t.data for t in ts], axis=ax), tuple(ts), back, "stack")


def gather_rows(x, indices) -> Tensor:
    """``x[indices]`` along the first axis; ``indices`` may have any shape."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (full,)

    return make_result(x.data[idx], (x,), back, "gather_rows")


def segment_sum(x, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``x`` that share a segment id; empty segments are zero."""
    x = as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != x.shape[:1]:
        raise ShapeError(f"segment_sum: {seg.shape[0] if seg.ndim else 0} ids for {x.shape[0]} rows")
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    return make_result(out, (x,), lambda g: (g[seg],), "segment_sum")


# -- reductions -------------------------------------------------------------

def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), back, "reduce_sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return make_result(out, (x,), back, "reduce_mean")


def reduce_max(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Maximum; the gradient goes to the first maximal element on ties."""
    x = as_tensor(x)
    if axis is None:
        flat = int(np.argmax(x.data))
        out = x.data.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * x.ndim)

        def back(g):
            full = np.zeros(x.data.size)
            full[flat] = np.sum(g)
            return (full.reshape(x.shape),)

        return make_result(np.asarray(out), (x,), back, "reduce_max")

    ax = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg, g, axis=ax)
        return (full,)

    return make_result(out if keepdims else np.squeeze(out, ax), (x,), back, "reduce_max")


# -- normalisers and losses -------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), back, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), back, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} and labels {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return make_result(np.asarray(loss), (logits,), back, "cross_entropy")


def segment_softmax(logits, segment_ids, num_segments: int) -> Tensor:
    """Softmax over the rows that share a segment id (rows may be [E] or [E × H])."""
    logits = as_tensor(logits)
    seg = np.asarray(segment_ids, dtype=np.int64)
    # per-segment max as a constant shift; softmax is invariant to it
    shift = np.full((num_segments,) + logits.shape[1:], -np.inf)
    np.maximum.at(shift, seg, logits.data)
    e = exp(sub(logits, shift[seg]))
    return div(e, gather_rows(segment_sum(e, seg, num_segments), seg))
