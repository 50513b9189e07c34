"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import NonFiniteValue, Tensor, grad_eval


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` rebuilds the scalar graph from the current parameter values on
    every call. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteValue("objective is not finite at the base point")
    grad_eval(out)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f().value)
            flat[k] = orig - h
            fm = float(f().value)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteValue(f"objective not finite near coordinate {k} of {p.name or 'param'}")
            numeric = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
