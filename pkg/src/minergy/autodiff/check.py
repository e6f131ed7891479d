"""Central finite-difference oracle for gradient verification.

This is the independent check everything else is measured against: perturb
each coordinate, difference the scalar objective, compare against the engine's
reverse-mode gradient.  Run it in 64-bit mode; the cancellation error of
central differences at eps=1e-5 sits near 1e-7, far below the 1e-4 gate.
"""

from __future__ import annotations

import numpy as np

from .engine import ContractViolation, Value, grad


class NonFiniteValue(ArithmeticError):
    """The objective or its input produced a non-finite number."""


def _assert_finite(arr: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteValue(f"non-finite entry in {what} at index {idx}")


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max over elements of |a-b| / max(|a|, |b|, 1e-8)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_difference_check(f, x: Value, eps: float = 1e-5) -> float:
    """Max relative error between grad(f)(x) and central differences.

    `f` maps one Value to a scalar Value. Requires eps > 0 and 64-bit mode
    for a meaningful comparison.
    """
    if eps <= 0:
        raise ContractViolation(f"eps must be positive, got {eps}")
    _assert_finite(x.data, "x")

    leaf = x.detach(requires_grad=True)
    y = f(leaf)
    if y.size != 1:
        raise ContractViolation(f"objective must be scalar, got shape {y.shape}")
    _assert_finite(y.data, "f(x)")
    (g,) = grad(y, [leaf])
    analytic = np.asarray(g.data, dtype=np.float64)

    numeric = np.zeros(x.shape, dtype=np.float64)
    base = np.asarray(x.data, dtype=np.float64)
    for idx in np.ndindex(*x.shape):
        hi = base.copy()
        hi[idx] += eps
        lo = base.copy()
        lo[idx] -= eps
        fhi = f(Value(hi)).item()
        flo = f(Value(lo)).item()
        if not (np.isfinite(fhi) and np.isfinite(flo)):
            raise NonFiniteValue(f"non-finite objective when perturbing element {idx}")
        numeric[idx] = (fhi - flo) / (2.0 * eps)

    return relative_error(analytic, numeric)
