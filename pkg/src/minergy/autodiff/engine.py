"""Reverse-mode automatic differentiation over dense numpy arrays.

The whole package hinges on one capability: differentiating *through* a
gradient computation.  The inner prediction loop descends an energy surface,
and the training loss is then differentiated through that descent, which needs
gradients of gradients.  Instead of a dedicated Hessian-vector-product entry
point, every backward rule in `ops` is written in terms of the same primitives
it differentiates.  Calling `grad` with `create_higher_order_graph=True`
therefore records the backward pass itself as a graph, and a second `grad`
call over the result is valid and correct.

Design constraints honoured here:

* Values are immutable once created; their arrays are marked read-only.
  In-place mutation would silently corrupt a recorded graph.
* Gradient accumulation across fan-out is summation (multivariate chain rule).
* Precision is a global engine mode (64-bit for verification, 32-bit for
  training throughput), fixed at graph creation time.
* Graph construction and backward are single-threaded per graph; distinct
  graphs may live on distinct threads, hence thread-local mode state.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ContractViolation(ValueError):
    """A caller broke an operation's stated precondition."""


_DTYPES = {32: np.float32, 64: np.float64}


class _ModeState(threading.local):
    def __init__(self):
        self.precision_bits = 64
        self.grad_enabled = True


_MODE = _ModeState()


def set_precision(bits: int) -> None:
    """Fix the engine dtype: 64 for verification runs, 32 for training throughput."""
    if bits not in _DTYPES:
        raise ContractViolation(f"precision must be 32 or 64, got {bits!r}")
    _MODE.precision_bits = bits


def get_precision() -> int:
    return _MODE.precision_bits


def active_dtype() -> np.dtype:
    return np.dtype(_DTYPES[_MODE.precision_bits])


@contextmanager
def precision(bits: int):
    """Temporarily switch precision. Do not mix dtypes within one graph."""
    prev = _MODE.precision_bits
    set_precision(bits)
    try:
        yield
    finally:
        _MODE.precision_bits = prev


@contextmanager
def no_grad():
    """Disable graph recording; ops produce plain constant Values."""
    prev = _MODE.grad_enabled
    _MODE.grad_enabled = False
    try:
        yield
    finally:
        _MODE.grad_enabled = prev


@contextmanager
def _grad_mode(enabled: bool):
    prev = _MODE.grad_enabled
    _MODE.grad_enabled = enabled
    try:
        yield
    finally:
        _MODE.grad_enabled = prev


def make_rng(seed: int) -> np.random.Generator:
    """The single seeding entry point; every module draws randomness through this."""
    return np.random.default_rng(seed)


class _Op:
    """Record of the operation that produced a Value.

    `vjp(out, g)` receives the produced Value and the incoming cotangent and
    returns one gradient Value (or None) per input.  Passing `out` as an
    argument rather than capturing it in the closure avoids reference cycles.
    """

    __slots__ = ("name", "inputs", "vjp")

    def __init__(self, name: str, inputs: tuple, vjp: Callable):
        self.name = name
        self.inputs = inputs
        self.vjp = vjp


class Value:
    """A dense real array plus the bookkeeping needed to differentiate it.

    Leaves are created directly (parameters with `requires_grad=True`,
    constants without); interior nodes carry a `producer` op record.  Data is
    read-only for the Value's lifetime.
    """

    __slots__ = ("data", "requires_grad", "producer")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=active_dtype())  # private copy
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.producer: Optional[_Op] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, producer: Optional[_Op]) -> "Value":
        v = cls.__new__(cls)
        arr.setflags(write=False)
        v.data = arr
        v.requires_grad = requires_grad
        v.producer = producer
        return v

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractViolation(f"item() on non-scalar Value of shape {self.shape}")

    def detach(self, requires_grad: bool = False) -> "Value":
        """Sever graph history; shares the (read-only) array."""
        return Value._wrap(self.data, requires_grad, None)

    def __repr__(self) -> str:
        tag = "param" if (self.requires_grad and self.producer is None) else (
            self.producer.name if self.producer else "const")
        return f"Value(shape={self.shape}, {tag})"

    # Operators delegate to ops; imported lazily to dodge the circular import.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __pow__(self, exponent):
        from . import ops
        return ops.pow_const(self, exponent)

    def __getitem__(self, key):
        from . import ops
        return ops.slice_(self, key)


def as_value(x) -> Value:
    if isinstance(x, Value):
        return x
    return Value(x)


def constant(x) -> Value:
    return as_value(x)


def zeros_like(v: Value) -> Value:
    return Value._wrap(np.zeros(v.shape, dtype=v.dtype), False, None)


@dataclass
class GradRequest:
    """A differentiation request: d(output)/d(wrt) for each wrt entry."""

    output: Value
    wrt: list = field(default_factory=list)
    create_higher_order_graph: bool = False

    def run(self) -> list:
        return grad(self.output, self.wrt, self.create_higher_order_graph)


def _topo_order(root: Value) -> list:
    """Children-before-parents ordering of the subgraph reachable from root.

    Only edges into grad-requiring inputs are followed; constant subgraphs
    cannot contain a differentiation target by construction.
    """
    order: list = []
    seen: set = set()
    stack: list = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        if node.producer is not None:
            for inp in node.producer.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def grad(output: Value, wrt: Sequence[Value], create_higher_order_graph: bool = False) -> list:
    """Reverse-mode gradients of a scalar output.

    Returns one Value per wrt entry, shapes matching.  A wrt Value not
    reachable from the output gets an exactly-zero gradient (documented
    behaviour, not an error).  With `create_higher_order_graph`, the backward
    pass itself is recorded, so the results can be differentiated again.
    """
    from . import ops

    if output.size != 1:
        raise ContractViolation(f"grad needs a scalar output, got shape {output.shape}")
    seed = Value._wrap(np.ones(output.shape, dtype=output.dtype), False, None)
    grads: dict = {id(output): seed}
    order = _topo_order(output)
    with _grad_mode(create_higher_order_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.producer is None:
                continue
            op = node.producer
            pieces = op.vjp(node, g)
            for inp, piece in zip(op.inputs, pieces):
                if piece is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = piece if prev is None else ops.add(prev, piece)
    return [grads.get(id(w)) if grads.get(id(w)) is not None else zeros_like(w) for w in wrt]
