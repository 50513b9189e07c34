"""Toy image and text encoders built on the autodiff tensors.

Text: token embedding table, mean pooling, two tanh affine layers and a
linear projection. Image: two tanh affine layers and a linear projection.
Both end in the same projection dimension.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .numeric import autodiff as ad
from .numeric.autodiff import Parameter, Tensor
from .similarity import tokenize

UNK = "<unk>"

IMAGE_PARAMS = ("img_W1", "img_b1", "img_W2", "img_b2", "img_P")
TEXT_PARAMS = ("txt_E", "txt_W1", "txt_b1", "txt_W2", "txt_b2", "txt_P")


class ShapeMismatch(ValueError):
    pass


class EmptyTokenization(ValueError):
    pass


class TokenVocab:
    def __init__(self, tokens: Iterable[str]):
        toks = [UNK] + sorted(set(tokens) - {UNK})
        self.tokens = toks
        self.index = {t: i for i, t in enumerate(toks)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "TokenVocab":
        seen: set[str] = set()
        for t in texts:
            seen.update(tokenize(t))
        return cls(seen)

    def ids(self, text: str) -> list[int]:
        toks = tokenize(text)
        if not toks:
            raise EmptyTokenization(f"no tokens in {text!r}")
        return [self.index.get(t, 0) for t in toks]

    def bag(self, texts: Sequence[str]) -> np.ndarray:
        """Row-normalised token count matrix (mean-pooling weights)."""
        out = np.zeros((len(texts), len(self)))
        for r, text in enumerate(texts):
            ids = self.ids(text)
            for i in ids:
                out[r, i] += 1.0
            out[r] /= len(ids)
        return out


@dataclass
class EncoderParams:
    params: dict[str, Tensor]
    vocab: TokenVocab
    feature_dim: int

    @property
    def d_proj(self) -> int:
        return self.params["img_P"].shape[1]

    def ordered(self) -> list[Tensor]:
        return [self.params[k] for k in IMAGE_PARAMS + TEXT_PARAMS]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            {k: Parameter(v.value.copy(), name=k) for k, v in self.params.items()}, self.vocab, self.feature_dim
        )


def _affine_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(
    feature_dim: int,
    vocab: TokenVocab,
    rng: np.random.Generator,
    d_emb: int = 32,
    d_hidden: int = 64,
    d_proj: int = 32,
) -> EncoderParams:
    """Uniform(+-1/sqrt(fan_in)) affine weights and biases, N(0, 0.02) embeddings."""
    p = {}
    p["img_W1"] = _affine_init(rng, feature_dim, d_hidden)
    p["img_b1"] = rng.uniform(-1, 1, size=(1, d_hidden)) / np.sqrt(feature_dim)
    p["img_W2"] = _affine_init(rng, d_hidden, d_hidden)
    p["img_b2"] = rng.uniform(-1, 1, size=(1, d_hidden)) / np.sqrt(d_hidden)
    p["img_P"] = _affine_init(rng, d_hidden, d_proj)
    p["txt_E"] = rng.normal(scale=0.02, size=(len(vocab), d_emb))
    p["txt_W1"] = _affine_init(rng, d_emb, d_hidden)
    p["txt_b1"] = rng.uniform(-1, 1, size=(1, d_hidden)) / np.sqrt(d_emb)
    p["txt_W2"] = _affine_init(rng, d_hidden, d_hidden)
    p["txt_b2"] = rng.uniform(-1, 1, size=(1, d_hidden)) / np.sqrt(d_hidden)
    p["txt_P"] = _affine_init(rng, d_hidden, d_proj)
    return EncoderParams({k: Parameter(v, name=k) for k, v in p.items()}, vocab, feature_dim)


def encode_image(params: EncoderParams, x) -> Tensor:
    """Rows of ``x`` (or a single feature vector) to projection space."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.feature_dim:
        raise ShapeMismatch(f"expected feature length {params.feature_dim}, got shape {x.shape}")
    p = params.params
    h = ad.tanh(ad.matmul(x, p["img_W1"]) + p["img_b1"])
    h = ad.tanh(ad.matmul(h, p["img_W2"]) + p["img_b2"])
    return ad.matmul(h, p["img_P"])


def encode_bag(params: EncoderParams, bag: np.ndarray) -> Tensor:
    p = params.params
    pooled = ad.matmul(bag, p["txt_E"])
    h = ad.tanh(ad.matmul(pooled, p["txt_W1"]) + p["txt_b1"])
    h = ad.tanh(ad.matmul(h, p["txt_W2"]) + p["txt_b2"])
    return ad.matmul(h, p["txt_P"])


def encode_text(params: EncoderParams, texts: str | Sequence[str]) -> Tensor:
    if isinstance(texts, str):
        texts = [texts]
    return encode_bag(params, params.vocab.bag(texts))
