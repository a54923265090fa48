"""Central-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from capdet.tensor import Tensor, backward


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def pass_(self) -> bool:
        return self.passed


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-3,
    tol: float = 1e-4,
    floor: float = 1e-2,
) -> GradCheckReport:
    """Compare ``backward`` gradients of ``f`` at ``x`` with central differences.

    The analytic side runs at the dtype of ``x`` (float32 in practice).  The
    numeric side re-evaluates ``f`` on float64 copies of ``x``: at float32 the
    perturbation ``x + h`` alone carries ~1e-4 relative rounding error, which
    would swamp any tolerance this tight.  Per element the error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float32)

    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ValueError(f"f must return a scalar, got shape {out.shape}")
    again = f(Tensor(base.copy()))
    if out.data.tobytes() != again.data.tobytes():
        raise NonDeterministicError("f returned different values on identical input")
    backward(out)
    analytic = np.zeros(base.shape) if xt.grad is None else xt.grad.astype(np.float64)

    x64 = base.astype(np.float64)
    numeric = np.zeros(base.shape)
    flat = numeric.reshape(-1)
    for i in range(x64.size):
        xp = x64.copy().reshape(-1)
        xm = x64.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = float(f(Tensor(xp.reshape(base.shape), dtype=np.float64)).data)
        fm = float(f(Tensor(xm.reshape(base.shape), dtype=np.float64)).data)
        flat[i] = (fp - fm) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, max_rel < tol, analytic, numeric)
