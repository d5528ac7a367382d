"""Finite-difference verification of tape gradients.

Central differences are the independent oracle for every differentiable op:
the function under test runs in ordinary float32, while the difference
quotient itself is formed in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

__all__ = ["GradCheckError", "GradCheckReport", "gradient_check", "check_parameter_slice"]


class GradCheckError(RuntimeError):
    """Bad inputs to the checker itself (not a failed check)."""


@dataclass
class GradCheckReport:
    """Per-element comparison of tape gradient vs. central differences."""

    tape_grad: np.ndarray
    fd_grad: np.ndarray
    rel_err: np.ndarray
    tol: float
    failed: np.ndarray = field(init=False)

    def __post_init__(self):
        self.failed = self.rel_err > self.tol

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return not bool(self.failed.any())

    def __repr__(self) -> str:
        status = "pass" if self.passed else f"FAIL ({int(self.failed.sum())} elems)"
        return f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, tol={self.tol:g}, {status})"


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def _as_scalar_fn(f: Callable[[Tensor], Tensor], x: Tensor, seed: int):
    """Reduce a tensor-valued f to a scalar via a fixed random projection."""
    probe = f(Tensor(x.data.copy()))
    if probe.size == 1:
        return lambda t: f(t).reshape(()), probe
    r = np.random.default_rng(seed).standard_normal(probe.size).astype(np.float32)
    r_t = Tensor(r)

    def scalar_f(t: Tensor) -> Tensor:
        return (f(t).reshape((probe.size,)) * r_t).sum()

    return scalar_f, probe


def gradient_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-3,
    tol: float = 1e-2,
    denom_floor: float = 1e-3,
    projection_seed: int = 0,
) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``x`` against central differences.

    ``f`` maps a Tensor to a Tensor; non-scalar outputs are contracted with a
    fixed random vector so the check stays scalar-valued.  ``f`` must be
    deterministic, which is verified by evaluating it twice.

    Returns a report with per-element relative errors; elements whose error
    exceeds ``tol`` are flagged.
    """
    if h <= 0:
        raise GradCheckError(f"step size must be positive, got {h}")

    scalar_f, probe = _as_scalar_fn(f, x, projection_seed)
    probe2 = f(Tensor(x.data.copy()))
    if probe.shape != probe2.shape or not np.array_equal(probe.data, probe2.data):
        raise GradCheckError(
            "function under test is not deterministic: two evaluations differ"
        )

    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = scalar_f(leaf)
    tape.backward(out)
    tape_grad = leaf.grad.astype(np.float64).reshape(-1)

    flat = x.data.reshape(-1)
    fd = np.empty(flat.size, np.float64)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + np.float32(h)
        y_plus = float(scalar_f(Tensor(bumped.reshape(x.shape))).item())
        bumped[i] = flat[i] - np.float32(h)
        y_minus = float(scalar_f(Tensor(bumped.reshape(x.shape))).item())
        fd[i] = (y_plus - y_minus) / (2.0 * h)

    rel = _rel_err(tape_grad, fd, denom_floor)
    return GradCheckReport(
        tape_grad.reshape(x.shape),
        fd.reshape(x.shape),
        rel.reshape(x.shape),
        tol,
    )


def check_parameter_slice(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    n_elements: int = 10,
    h: float = 1e-2,
    tol: float = 1e-2,
    denom_floor: float = 1e-2,
    seed: int = 0,
) -> GradCheckReport:
    """Finite-difference check of a loss over a random slice of parameters.

    ``loss_fn`` rebuilds the scalar loss from the live parameter tensors, so
    perturbing a parameter element in place and re-evaluating gives the
    oracle value.  A random slice of ``n_elements`` across all parameters is
    checked, which keeps full-network verification affordable.
    """
    if not params:
        raise GradCheckError("no parameters to check")
    rng = np.random.default_rng(seed)

    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    sizes = np.array([p.size for _, p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_elements, total), replace=False)
    bounds = np.cumsum(sizes)

    tape_vals = np.empty(picks.size, np.float64)
    fd_vals = np.empty(picks.size, np.float64)
    for j, flat_idx in enumerate(np.sort(picks)):
        pi = int(np.searchsorted(bounds, flat_idx, side="right"))
        name, p = params[pi]
        local = int(flat_idx - (bounds[pi - 1] if pi else 0))
        if p.grad is None:
            raise GradCheckError(f"parameter {name} received no gradient")
        tape_vals[j] = float(p.grad.reshape(-1)[local])

        flat = p.data.reshape(-1)
        orig = flat[local].copy()
        flat[local] = orig + np.float32(h)
        y_plus = float(loss_fn().item())
        flat[local] = orig - np.float32(h)
        y_minus = float(loss_fn().item())
        flat[local] = orig
        fd_vals[j] = (y_plus - y_minus) / (2.0 * h)

    for _, p in params:
        p.zero_grad()

    rel = _rel_err(tape_vals, fd_vals, denom_floor)
    return GradCheckReport(tape_vals, fd_vals, rel, tol)
