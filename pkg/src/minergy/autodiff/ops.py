"""Primitive array operations with backward rules made of the same primitives.

Each primitive computes its forward value with numpy and registers a
vector-Jacobian product that manipulates Values, not raw arrays.  That closure
property is what makes second-order differentiation work: when `grad` runs
with `create_higher_order_graph=True`, the backward rules below execute while
graph recording is on, so the gradient itself has a graph.

Conventions:
* numpy broadcasting is allowed in `add`/`mul`/`div`; the backward rule sums
  the cotangent back down to each input's shape.
* `masked_fill` and `clamp` treat their branch condition as locally constant
  (the usual subgradient convention; boundaries take the interior value).
* slicing accepts slice objects only (no integer indexing), so every slice has
  an exact zero-padded adjoint (`unslice`).
"""

from __future__ import annotations

import numpy as np

from .engine import ContractViolation, Value, _MODE, _Op, as_value


def _make(name: str, out_data: np.ndarray, inputs: tuple, vjp) -> Value:
    track = _MODE.grad_enabled and any(v.requires_grad for v in inputs)
    return Value._wrap(out_data, track, _Op(name, inputs, vjp) if track else None)


def _unbroadcast(g: Value, shape: tuple) -> Value:
    """Sum a cotangent down from a broadcast shape to the input's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (have, want) in enumerate(zip(g.shape, shape)) if want == 1 and have != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def _check_same_shape(name: str, a: Value, b: Value) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{name}: incompatible shapes {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_same_shape("add", a, b)

    def vjp(out, g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), vjp)


def neg(a) -> Value:
    a = as_value(a)

    def vjp(out, g):
        return (neg(g),)

    return _make("neg", -a.data, (a,), vjp)


def sub(a, b) -> Value:
    return add(a, neg(b))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_same_shape("mul", a, b)

    def vjp(out, g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_same_shape("div", a, b)

    def vjp(out, g):
        ga = _unbroadcast(div(g, b), a.shape)
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make("div", a.data / b.data, (a, b), vjp)


def _swap_last(v: Value) -> Value:
    axes = tuple(range(v.ndim - 2)) + (v.ndim - 1, v.ndim - 2)
    return transpose(v, axes)


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def vjp(out, g):
        ga = _unbroadcast(matmul(g, _swap_last(b)), a.shape)
        gb = _unbroadcast(matmul(_swap_last(a), g), b.shape)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), vjp)


def pow_const(a, exponent) -> Value:
    a = as_value(a)
    c = float(exponent)

    def vjp(out, g):
        return (mul(mul(g, c), pow_const(a, c - 1.0)),)

    return _make("pow", a.data ** c, (a,), vjp)


def exp(a) -> Value:
    a = as_value(a)

    def vjp(out, g):
        return (mul(g, out),)

    return _make("exp", np.exp(a.data), (a,), vjp)


def log(a) -> Value:
    a = as_value(a)

    def vjp(out, g):
        return (div(g, a),)

    return _make("log", np.log(a.data), (a,), vjp)


def sqrt(a) -> Value:
    a = as_value(a)

    def vjp(out, g):
        return (div(mul(g, 0.5), out),)

    return _make("sqrt", np.sqrt(a.data), (a,), vjp)


def sigmoid(a) -> Value:
    a = as_value(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(out_v, g):
        return (mul(g, mul(out_v, sub(1.0, out_v))),)

    return _make("sigmoid", out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape surgery

def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    axes = _norm_axis(axis, a.ndim)

    def vjp(out, g):
        if not keepdims:
            held = list(g.shape)
            for ax in sorted(axes):
                held.insert(ax, 1)
            g = reshape(g, tuple(held))
        return (broadcast_to(g, a.shape),)

    return _make("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


def broadcast_to(a, shape) -> Value:
    a = as_value(a)
    shape = tuple(shape)

    def vjp(out, g):
        return (_unbroadcast(g, a.shape),)

    return _make("broadcast", np.broadcast_to(a.data, shape), (a,), vjp)


def reshape(a, shape) -> Value:
    a = as_value(a)
    shape = tuple(shape)

    def vjp(out, g):
        return (reshape(g, a.shape),)

    return _make("reshape", np.reshape(a.data, shape), (a,), vjp)


def transpose(a, axes=None) -> Value:
    a = as_value(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(out, g):
        return (transpose(g, inverse),)

    return _make("transpose", np.transpose(a.data, axes), (a,), vjp)


def concat(values, axis: int) -> Value:
    vals = tuple(as_value(v) for v in values)
    if not vals:
        raise ContractViolation("concat of zero Values")
    axis = axis % vals[0].ndim
    extents = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + extents)

    def vjp(out, g):
        pieces = []
        for i, v in enumerate(vals):
            key = [slice(None)] * v.ndim
            key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(slice_(g, tuple(key)))
        return tuple(pieces)

    return _make("concat", np.concatenate([v.data for v in vals], axis=axis), vals, vjp)


def _norm_key(key, ndim: int) -> tuple:
    if not isinstance(key, tuple):
        key = (key,)
    if Ellipsis in key:
        i = key.index(Ellipsis)
        fill = ndim - (len(key) - 1)
        key = key[:i] + (slice(None),) * fill + key[i + 1:]
    key = key + (slice(None),) * (ndim - len(key))
    for k in key:
        if not isinstance(k, slice):
            raise ContractViolation(
                f"slices only (got {k!r}); integer indexing has no exact adjoint here; "
                "use gather_rows or narrow+reshape")
    return key


def slice_(a, key) -> Value:
    a = as_value(a)
    key = _norm_key(key, a.ndim)

    def vjp(out, g):
        return (unslice(g, key, a.shape),)

    return _make("slice", a.data[key], (a,), vjp)


def unslice(a, key, shape) -> Value:
    """Adjoint of slicing: embed `a` into zeros of `shape` at `key`."""
    a = as_value(a)
    shape = tuple(shape)
    key = _norm_key(key, len(shape))
    buf = np.zeros(shape, dtype=a.dtype)
    buf[key] = a.data

    def vjp(out, g):
        return (slice_(g, key),)

    return _make("unslice", buf, (a,), vjp)


def narrow(a, axis: int, start: int, length: int) -> Value:
    a = as_value(a)
    key = [slice(None)] * a.ndim
    key[axis % a.ndim] = slice(start, start + length)
    return slice_(a, tuple(key))


def gather_rows(table, ids) -> Value:
    """Row gather (embedding lookup): out[i...] = table[ids[i...]]."""
    table = as_value(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractViolation(f"gather_rows ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(
            f"gather_rows ids out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}")

    def vjp(out, g):
        return (scatter_rows(g, ids, table.shape[0]),)

    return _make("gather", table.data[ids], (table,), vjp)


def scatter_rows(src, ids, num_rows: int) -> Value:
    """Adjoint of gather_rows: sum src rows into a zero table at ids."""
    src = as_value(src)
    ids = np.asarray(ids)
    feat = src.shape[ids.ndim:]
    buf = np.zeros((num_rows,) + feat, dtype=src.dtype)
    np.add.at(buf, ids.reshape(-1), src.data.reshape((-1,) + feat))

    def vjp(out, g):
        return (gather_rows(g, ids),)

    return _make("scatter", buf, (src,), vjp)


# ---------------------------------------------------------------------------
# masking, clamping, softmax

def masked_fill(a, mask, fill_value: float) -> Value:
    """Replace entries where mask is true by fill_value; gradient flows only
    through the kept entries (the mask is a constant)."""
    a = as_value(a)
    mask = np.asarray(mask, dtype=bool)
    keep = Value((~mask).astype(a.dtype))

    def vjp(out, g):
        return (_unbroadcast(mul(g, keep), a.shape),)

    return _make("masked_fill", np.where(mask, a.dtype.type(fill_value), a.data), (a,), vjp)


def clamp(a, lo=None, hi=None) -> Value:
    a = as_value(a)
    if lo is None and hi is None:
        raise ContractViolation("clamp needs at least one bound")
    passthrough = np.ones(a.shape, dtype=a.dtype)
    if lo is not None:
        passthrough *= (a.data >= lo)
    if hi is not None:
        passthrough *= (a.data <= hi)
    keep = Value(passthrough)

    def vjp(out, g):
        return (mul(g, keep),)

    return _make("clamp", np.clip(a.data, lo, hi), (a,), vjp)


def softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    ax = axis % a.ndim
    shifted = a.data - np.max(a.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=ax, keepdims=True)

    def vjp(out_v, g):
        inner = sub(g, sum_(mul(g, out_v), axis=ax, keepdims=True))
        return (mul(out_v, inner),)

    return _make("softmax", out, (a,), vjp)


# ---------------------------------------------------------------------------
# composites used across the package (built purely from primitives)

def square(a) -> Value:
    a = as_value(a)
    return mul(a, a)


def silu(a) -> Value:
    a = as_value(a)
    return mul(a, sigmoid(a))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Value:
    """Numerically stable log-sum-exp; the max shift is an exact constant."""
    a = as_value(a)
    ax = axis % a.ndim
    shift = Value(np.max(a.data, axis=ax, keepdims=True))
    out = add(log(sum_(exp(sub(a, shift)), axis=ax, keepdims=True)), shift)
    if not keepdims:
        shape = out.shape[:ax] + out.shape[ax + 1:]
        out = reshape(out, shape)
    return out


def smooth_l1(diff, beta: float = 1.0) -> Value:
    """Huber-style loss on a residual: 0.5*d^2/beta inside |d|<=beta, |d|-beta/2 outside.

    Written as c*(d - c/2)/beta with c = clamp(d, -beta, beta), which is the
    same function expressed entirely in primitives.
    """
    d = as_value(diff)
    c = clamp(d, -beta, beta)
    return div(mul(c, sub(d, mul(c, 0.5))), beta)
