"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    worst_index: tuple | None = None


def _scalar(value):
    value = float(np.asarray(value.data if hasattr(value, "data") else value))
    if not np.isfinite(value):
        raise FloatingPointError(f"objective is not finite: {value}")
    return value


def finite_diff_grad_check(f, x, step=1e-3, tol=1e-3, indices=None, floor=1e-6):
    """Compare ``x.grad`` from ``f().backward()`` with central differences.

    ``f`` takes no arguments and returns a scalar Tensor that depends on ``x``
    (a leaf with ``requires_grad``). ``indices`` restricts the check to the given
    flat coordinates. The relative error of each coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    x.data = np.ascontiguousarray(x.data)
    x.grad = None
    out = f()
    _scalar(out)
    out.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst, worst_idx, count = 0.0, None, 0
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = _scalar(f())
            flat[i] = orig - step
            f_minus = _scalar(f())
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            count += 1
            if err > worst:
                worst, worst_idx = err, np.unravel_index(i, x.shape)
    x.grad = None
    return GradCheckReport(max_rel_err=worst, passed=worst < tol, checked=count, worst_index=worst_idx)
