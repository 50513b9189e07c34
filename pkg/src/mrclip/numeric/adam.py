from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    """Moment buffers for a fixed, ordered list of parameters."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params], **kw)


def adam_step(state: AdamState, params: Sequence[Tensor], lr: float | Sequence[float]) -> None:
    """One bias-corrected Adam update, in place.

    ``lr`` is either one rate for all parameters or one rate per parameter.
    """
    if len(params) != len(state.m):
        raise ValueError("parameter list does not match optimizer state")
    rates = [lr] * len(params) if np.isscalar(lr) else list(lr)
    if any(r < 0 for r in rates):
        raise ValueError("learning rate must be nonnegative")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v, rate in zip(params, state.m, state.v, rates):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.value -= rate * m_hat / (np.sqrt(v_hat) + state.eps)
