"""Deterministic operation tallies.

Kernels report the work of their matrix products through :func:`record`
and the size of their live intermediates through :func:`hold`.  Both are
no-ops unless a :func:`counting` region is active in the current context.
Vector norms, scalings and elementwise nonlinearities are not tallied; the
counter tracks the matrix-product work that dominates asymptotic cost.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

_ACTIVE: contextvars.ContextVar["OpCounter | None"] = contextvars.ContextVar(
    "atp_op_counter", default=None
)


@dataclass
class OpCounter:
    multiplies: int = 0
    adds: int = 0
    peak_values_held: int = 0

    def merge(self, other: "OpCounter") -> "OpCounter":
        """Combine two tallies; counts add, peaks take the maximum."""
        return OpCounter(
            self.multiplies + other.multiplies,
            self.adds + other.adds,
            max(self.peak_values_held, other.peak_values_held),
        )

    __add__ = merge

    def scaled(self, n: int) -> "OpCounter":
        return OpCounter(self.multiplies * n, self.adds * n, self.peak_values_held)

    def to_dict(self) -> dict:
        return asdict(self)


@contextmanager
def counting():
    """Collect tallies in a fresh local counter, merged into any enclosing one on exit."""
    local = OpCounter()
    token = _ACTIVE.set(local)
    try:
        yield local
    finally:
        _ACTIVE.reset(token)
        outer = _ACTIVE.get()
        if outer is not None:
            outer.multiplies += local.multiplies
            outer.adds += local.adds
            outer.peak_values_held = max(outer.peak_values_held, local.peak_values_held)


def record(multiplies: int, adds: int = 0) -> None:
    c = _ACTIVE.get()
    if c is not None:
        c.multiplies += int(multiplies)
        c.adds += int(adds)


def hold(values: int) -> None:
    c = _ACTIVE.get()
    if c is not None and values > c.peak_values_held:
        c.peak_values_held = int(values)


def product_counts(m: int, k: int, n: int) -> tuple[int, int]:
    """Multiplies and adds of a dense (m x k) @ (k x n) product."""
    return m * k * n, m * n * (k - 1)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with its cost reported to the active counter.

    1-D operands count as a single row (left) or column (right).
    """
    m = 1 if a.ndim == 1 else a.shape[0]
    k = a.shape[-1]
    n = 1 if b.ndim == 1 else b.shape[1]
    record(*product_counts(m, k, n))
    return a @ b
