"""Contrastive loss stack: InfoNCE (CLIP) plus the KL soft-target term.

Plain numpy functions expose each stage for inspection; ``loss_graph``
builds the same computation on autodiff tensors for training and gradient
checks. ``total_loss`` evaluates the graph and records every intermediate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import autodiff as ad
from .numeric.autodiff import Tensor


class ZeroNormRow(ValueError):
    def __init__(self, side: str, row: int):
        self.side = side
        self.row = row
        super().__init__(f"{side} embedding row {row} has zero norm")


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    alpha: float = 1.0
    beta: float = 1.0
    epsilon_smooth: float = 1e-6

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0 or self.beta < 0 or not self.alpha + self.beta > 0:
            raise ValueError("alpha and beta must be nonnegative with a positive sum")
        if not self.epsilon_smooth > 0:
            raise ValueError("epsilon_smooth must be positive")


@dataclass(frozen=True)
class EmbeddingBatch:
    image_vectors: np.ndarray
    text_vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.image_vectors, dtype=np.float64)
        t = np.asarray(self.text_vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape != t.shape:
            raise ShapeMismatch(f"image {v.shape} vs text {t.shape}")
        _check_norms(v, "image")
        _check_norms(t, "text")
        object.__setattr__(self, "image_vectors", v)
        object.__setattr__(self, "text_vectors", t)

    @property
    def n(self) -> int:
        return self.image_vectors.shape[0]


@dataclass
class LossBreakdown:
    C: np.ndarray
    P_v2t: np.ndarray
    P_t2v: np.ndarray
    L_v2t: float
    L_t2v: float
    L_clip: float
    L_se_v2t: float
    L_se_t2v: float
    L_se: float
    L_total: float

    def scalars(self) -> dict[str, float]:
        return {
            "L_v2t": self.L_v2t,
            "L_t2v": self.L_t2v,
            "L_clip": self.L_clip,
            "L_se_v2t": self.L_se_v2t,
            "L_se_t2v": self.L_se_t2v,
            "L_se": self.L_se,
            "L_total": self.L_total,
        }

    def to_json(self) -> dict:
        out = dict(self.scalars())
        out.update(C=self.C.tolist(), P_v2t=self.P_v2t.tolist(), P_t2v=self.P_t2v.tolist())
        return out


def _check_norms(x: np.ndarray, side: str) -> None:
    norms = np.sqrt((x * x).sum(axis=1))
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ZeroNormRow(side, int(bad[0]))


def cosine_matrix(batch: EmbeddingBatch) -> np.ndarray:
    v, t = batch.image_vectors, batch.text_vectors
    vn = v / np.sqrt((v * v).sum(axis=1, keepdims=True))
    tn = t / np.sqrt((t * t).sum(axis=1, keepdims=True))
    return vn @ tn.T


def _row_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def prob_matrices(C: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Image-to-text and text-to-image softmax matrices, both row-stochastic."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    C = np.asarray(C, dtype=np.float64)
    return _row_softmax(C / tau), _row_softmax(C.T / tau)


def clip_loss(P_v2t: np.ndarray, P_t2v: np.ndarray) -> tuple[float, float, float]:
    n = P_v2t.shape[0]
    l_v2t = -float(np.log(np.diag(P_v2t)).sum()) / n
    l_t2v = -float(np.log(np.diag(P_t2v)).sum()) / n
    return l_v2t, l_t2v, (l_v2t + l_t2v) / 2


def soft_target(S, epsilon_smooth: float = 1e-6) -> np.ndarray:
    """Row-normalise ``S + eps``. Every entry of the result is positive."""
    S = np.asarray(getattr(S, "values", S), dtype=np.float64)
    Q = S + epsilon_smooth
    return Q / Q.sum(axis=1, keepdims=True)


def _mean_row_kl(P: np.ndarray, Q: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(Q)), 0.0)
    return float(terms.sum()) / P.shape[0]


def se_loss(P_v2t: np.ndarray, P_t2v: np.ndarray, S, epsilon_smooth: float = 1e-6) -> tuple[float, float, float]:
    """Mean per-row KL(P || Q) for both directions.

    The image-to-text rows are compared with ``soft_target(S)`` and the
    text-to-image rows with ``soft_target(S.T)``; for symmetric ``S`` the
    two targets coincide.
    """
    S = np.asarray(getattr(S, "values", S), dtype=np.float64)
    if S.shape != P_v2t.shape or S.shape != P_t2v.shape:
        raise ShapeMismatch(f"S {S.shape} vs P {P_v2t.shape}")
    q_v2t = soft_target(S, epsilon_smooth)
    q_t2v = soft_target(S.T, epsilon_smooth)
    a = _mean_row_kl(P_v2t, q_v2t)
    b = _mean_row_kl(P_t2v, q_t2v)
    return a, b, (a + b) / 2


def loss_graph(V: Tensor, T: Tensor, S, cfg: LossConfig) -> tuple[Tensor, dict[str, Tensor]]:
    """Differentiable total loss over image rows ``V`` and text rows ``T``.

    Uses log-softmax for the log-probabilities; the probability matrices are
    recovered with ``exp``. When ``cfg.beta == 0`` the KL branch is skipped
    and ``L_se`` is reported as an exact zero.
    """
    if V.shape != T.shape or len(V.shape) != 2:
        raise ShapeMismatch(f"image {V.shape} vs text {T.shape}")
    _check_norms(V.value, "image")
    _check_norms(T.value, "text")
    n = V.shape[0]
    eye = np.eye(n)

    vn = V / ad.row_l2norm(V)
    tn = T / ad.row_l2norm(T)
    C = vn @ tn.T
    logP_v2t = ad.row_log_softmax(C / cfg.tau)
    logP_t2v = ad.row_log_softmax(C.T / cfg.tau)

    L_v2t = ad.sum(logP_v2t * eye) * (-1.0 / n)
    L_t2v = ad.sum(logP_t2v * eye) * (-1.0 / n)
    L_clip = (L_v2t + L_t2v) * 0.5
    parts = {"C": C, "logP_v2t": logP_v2t, "logP_t2v": logP_t2v, "L_v2t": L_v2t, "L_t2v": L_t2v, "L_clip": L_clip}

    if cfg.beta == 0 or S is None:
        zero = Tensor(0.0)
        parts.update(L_se_v2t=zero, L_se_t2v=zero, L_se=zero)
        total = L_clip * cfg.alpha
    else:
        S = np.asarray(getattr(S, "values", S), dtype=np.float64)
        if S.shape != (n, n):
            raise ShapeMismatch(f"S {S.shape} for batch of {n}")
        logQ_v2t = np.log(soft_target(S, cfg.epsilon_smooth))
        logQ_t2v = np.log(soft_target(S.T, cfg.epsilon_smooth))
        P_v2t = ad.exp(logP_v2t)
        P_t2v = ad.exp(logP_t2v)
        L_se_v2t = ad.sum(P_v2t * (logP_v2t - logQ_v2t)) * (1.0 / n)
        L_se_t2v = ad.sum(P_t2v * (logP_t2v - logQ_t2v)) * (1.0 / n)
        L_se = (L_se_v2t + L_se_t2v) * 0.5
        parts.update(L_se_v2t=L_se_v2t, L_se_t2v=L_se_t2v, L_se=L_se)
        total = L_clip * cfg.alpha + L_se * cfg.beta
    parts["L_total"] = total
    return total, parts


def total_loss(batch: EmbeddingBatch, S, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Evaluate ``alpha * L_clip + beta * L_se`` and keep the intermediates."""
    C = cosine_matrix(batch)
    P_v2t, P_t2v = prob_matrices(C, cfg.tau)
    L_v2t, L_t2v, L_clip = clip_loss(P_v2t, P_t2v)
    if S is None:
        if cfg.beta != 0:
            raise ValueError("a soft target matrix is required when beta > 0")
        L_se_v2t = L_se_t2v = L_se = 0.0
    else:
        L_se_v2t, L_se_t2v, L_se = se_loss(P_v2t, P_t2v, S, cfg.epsilon_smooth)
    L_total = cfg.alpha * L_clip + cfg.beta * L_se
    if not np.isfinite(L_total):
        raise FloatingPointError("loss is not finite")
    return LossBreakdown(C, P_v2t, P_t2v, L_v2t, L_t2v, L_clip, L_se_v2t, L_se_t2v, L_se, L_total)
