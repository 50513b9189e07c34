"""Image-to-text retrieval over deduplicated candidate texts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DimensionMismatch(ValueError):
    pass


class KOutOfRange(ValueError):
    pass


@dataclass
class RetrievalResult:
    top_k_accuracy: dict[int, float]
    n_images: int
    n_candidates: int
    ranks: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "top_k_accuracy": {str(k): v for k, v in self.top_k_accuracy.items()},
            "n_images": self.n_images,
            "n_candidates": self.n_candidates,
            "ranks": list(self.ranks),
        }


def dedupe_candidates(texts: Sequence[str]) -> tuple[list[str], list[int]]:
    """Unique texts in first-appearance order and each input's index among them."""
    if not texts:
        raise ValueError("no texts to deduplicate")
    index: dict[str, int] = {}
    gold = []
    for t in texts:
        gold.append(index.setdefault(t, len(index)))
    return list(index), gold


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.where(norms > 0, norms, 1.0)


def gold_ranks(image_emb, cand_emb, gold: Sequence[int]) -> np.ndarray:
    """1-based rank of each image's gold candidate.

    Candidates are ordered by cosine similarity, descending; equal scores
    rank the lower candidate index first.
    """
    img = np.asarray(image_emb, dtype=np.float64)
    cand = np.asarray(cand_emb, dtype=np.float64)
    if img.ndim != 2 or cand.ndim != 2 or img.shape[1] != cand.shape[1]:
        raise DimensionMismatch(f"images {img.shape} vs candidates {cand.shape}")
    gold = np.asarray(gold, dtype=np.int64)
    if gold.shape != (img.shape[0],):
        raise DimensionMismatch("one gold index per image required")
    sims = _unit_rows(img) @ _unit_rows(cand).T
    g = sims[np.arange(len(gold)), gold][:, None]
    idx = np.arange(cand.shape[0])[None, :]
    ahead = (sims > g) | ((sims == g) & (idx < gold[:, None]))
    return ahead.sum(axis=1) + 1


def topk_accuracy(image_emb, cand_emb, gold: Sequence[int], ks: Sequence[int] = (1, 2, 5, 10)) -> RetrievalResult:
    n_cand = np.asarray(cand_emb).shape[0]
    for k in ks:
        if not 1 <= k <= n_cand:
            raise KOutOfRange(f"K={k} with {n_cand} candidates")
    ranks = gold_ranks(image_emb, cand_emb, gold)
    acc = {int(k): float((ranks <= k).sum()) / len(ranks) for k in ks}
    return RetrievalResult(acc, len(ranks), n_cand, ranks.tolist())


def write_table_csv(path, rows: dict[str, RetrievalResult], ks: Sequence[int] = (1, 2, 5, 10)) -> None:
    """Method-by-Top-K table, one row per method."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [f"Top-{k}" for k in ks])
        for name, res in rows.items():
            w.writerow([name] + [repr(res.top_k_accuracy[k]) for k in ks])
