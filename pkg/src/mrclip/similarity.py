"""Mixed syntax/semantic similarity between clauses and descriptions.

Clause similarity is half the text Dice coefficient times the sum of two
binary agreements: location (orientation + anatomic site) and appearance.
Description similarity averages clause similarity over all clause pairs, and
a batch of descriptions yields the soft target matrix ``S``.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .report_model import ClauseFinding, Description, NormalSentinel


class EmptyClause(ValueError):
    pass


class BatchTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerConfig:
    mode: str = "word"
    lowercase: bool = True
    strip_punctuation: bool = True

    def __post_init__(self):
        if self.mode not in ("word", "character"):
            raise ValueError(f"tokenizer mode: {self.mode!r}")


DEFAULT_TOKENIZER = TokenizerConfig()

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation + "。，、；："})


def tokenize(text: str, cfg: TokenizerConfig = DEFAULT_TOKENIZER) -> list[str]:
    if cfg.lowercase:
        text = text.lower()
    if cfg.strip_punctuation:
        text = text.translate(_PUNCT_TABLE)
    if cfg.mode == "word":
        return text.split()
    return [ch for ch in text if not ch.isspace()]


def _counts(text: str, cfg: TokenizerConfig) -> Counter:
    toks = tokenize(text, cfg)
    if not toks:
        raise EmptyClause(f"no tokens in {text!r}")
    return Counter(toks)


def _dice(c1: Counter, c2: Counter) -> float:
    inter = sum((c1 & c2).values())
    return 2 * inter / (sum(c1.values()) + sum(c2.values()))


def tdc(t1: str, t2: str, cfg: TokenizerConfig = DEFAULT_TOKENIZER) -> float:
    """Text Dice coefficient over token multisets."""
    return _dice(_counts(t1, cfg), _counts(t2, cfg))


def _weights(f1: ClauseFinding, f2: ClauseFinding) -> tuple[int, int]:
    s1 = isinstance(f1, NormalSentinel)
    s2 = isinstance(f2, NormalSentinel)
    if s1 or s2:
        return (1, 1) if s1 and s2 else (0, 0)
    w_loc = int(f1.orientation == f2.orientation and f1.anatomic_site == f2.anatomic_site)
    w_per = int(f1.appearance == f2.appearance)
    return w_loc, w_per


def clause_similarity(
    c1: tuple[str, ClauseFinding],
    c2: tuple[str, ClauseFinding],
    cfg: TokenizerConfig = DEFAULT_TOKENIZER,
) -> float:
    w_loc, w_per = _weights(c1[1], c2[1])
    return 0.5 * tdc(c1[0], c2[0], cfg) * (w_loc + w_per)


def _ordered_sum(terms: list[float]) -> float:
    # Ascending order makes the sum independent of argument order, so
    # s(A, B) == s(B, A) holds bit for bit.
    total = 0.0
    for t in sorted(terms):
        total += t
    return total


def description_similarity(a: Description, b: Description, cfg: TokenizerConfig = DEFAULT_TOKENIZER) -> float:
    terms = [clause_similarity(ca, cb, cfg) for ca in a.clauses for cb in b.clauses]
    return _ordered_sum(terms) / (len(a.clauses) * len(b.clauses))


@dataclass(frozen=True)
class SoftTargetMatrix:
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]


def batch_similarity_matrix(batch: Sequence[Description], cfg: TokenizerConfig = DEFAULT_TOKENIZER) -> SoftTargetMatrix:
    """Pairwise description similarity for a batch, vectorised over pairs.

    Clause-pair terms are summed in ascending order exactly as in
    ``description_similarity``, so each entry is bit-identical to the scalar
    path and the matrix is exactly symmetric.
    """
    n = len(batch)
    if n < 2:
        raise BatchTooSmall(f"batch of {n}; need at least 2")

    clauses: list[tuple[str, ClauseFinding]] = []
    owner: list[int] = []
    slot: list[int] = []
    for i, d in enumerate(batch):
        for k, c in enumerate(d.clauses):
            clauses.append(c)
            owner.append(i)
            slot.append(k)
    n_cl = len(clauses)

    counters = [_counts(t, cfg) for t, _ in clauses]
    vocab: dict[str, int] = {}
    for c in counters:
        for tok in c:
            vocab.setdefault(tok, len(vocab))
    counts = np.zeros((n_cl, len(vocab)), dtype=np.int64)
    for r, c in enumerate(counters):
        for tok, k in c.items():
            counts[r, vocab[tok]] = k
    lengths = counts.sum(axis=1)
    inter = np.minimum(counts[:, None, :], counts[None, :, :]).sum(axis=2)
    dice = 2 * inter / (lengths[:, None] + lengths[None, :])

    # Integer keys for the semantic weights; -1 marks the normal sentinel.
    loc_ids: dict[tuple[str, str], int] = {}
    app_ids: dict[str, int] = {}
    loc = np.empty(n_cl, dtype=np.int64)
    app = np.empty(n_cl, dtype=np.int64)
    for r, (_, f) in enumerate(clauses):
        if isinstance(f, NormalSentinel):
            loc[r] = app[r] = -1
        else:
            loc[r] = loc_ids.setdefault((f.orientation, f.anatomic_site), len(loc_ids))
            app[r] = app_ids.setdefault(f.appearance, len(app_ids))
    sentinel = loc < 0
    both_sent = sentinel[:, None] & sentinel[None, :]
    any_sent = sentinel[:, None] | sentinel[None, :]
    w_loc = np.where(any_sent, both_sent, loc[:, None] == loc[None, :]).astype(np.int64)
    w_per = np.where(any_sent, both_sent, app[:, None] == app[None, :]).astype(np.int64)
    s_clause = 0.5 * dice * (w_loc + w_per)

    max_m = max(slot) + 1
    owner_arr = np.asarray(owner)
    slot_arr = np.asarray(slot)
    # padded[i, k] = row of clause k of description i in s_clause, or -1.
    padded = np.full((n, max_m), -1, dtype=np.int64)
    padded[owner_arr, slot_arr] = np.arange(n_cl)
    m_counts = np.array([len(d.clauses) for d in batch], dtype=np.int64)

    terms = np.zeros((n, n, max_m * max_m))
    for ka in range(max_m):
        ra = padded[:, ka]
        for kb in range(max_m):
            rb = padded[:, kb]
            valid = (ra >= 0)[:, None] & (rb >= 0)[None, :]
            term = s_clause[np.maximum(ra, 0)[:, None], np.maximum(rb, 0)[None, :]]
            terms[:, :, ka * max_m + kb] = np.where(valid, term, 0.0)
    # Padding zeros sort first and leave the running sum unchanged.
    terms.sort(axis=2)
    total = np.zeros((n, n))
    for k in range(terms.shape[2]):
        total = total + terms[:, :, k]
    values = total / (m_counts[:, None] * m_counts[None, :])
    return SoftTargetMatrix(values)
