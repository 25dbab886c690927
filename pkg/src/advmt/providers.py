"""Embedding providers for the paraphrase-similarity and BertScore metrics.

A provider exposes ``sentence_embed(text) -> (width,)`` and
``token_embed(text) -> (tokens, width)``. Pretrained encoders are optional; the
default :class:`HashingProvider` needs no weights and is fully deterministic.
"""
from __future__ import annotations

import hashlib
from functools import lru_cache
from typing import Protocol

import numpy as np

from .metrics import normalize


class EmbeddingProvider(Protocol):
    width: int

    def sentence_embed(self, text: str) -> np.ndarray: ...

    def token_embed(self, text: str) -> np.ndarray: ...


@lru_cache(maxsize=200_000)
def _feature_vector(feature: str, width: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "little")
    v = np.random.default_rng(seed).standard_normal(width)
    v.setflags(write=False)
    return v


class HashingProvider:
    """Character n-gram hashing embeddings (a bag-of-subwords stand-in for a sentence encoder).

    A token vector is the sum of random Gaussian vectors keyed by its boundary-marked
    character n-grams, so words sharing spelling share direction. The sentence vector
    is the mean of the token vectors.
    """

    def __init__(self, width: int = 768, orders: tuple[int, ...] = (2, 3, 4)):
        self.width = width
        self.orders = orders

    def _token(self, tok: str) -> np.ndarray:
        marked = f"<{tok}>"
        v = np.zeros(self.width)
        for n in self.orders:
            for i in range(max(len(marked) - n + 1, 1)):
                v += _feature_vector(marked[i:i + n], self.width)
        return v

    def token_embed(self, text: str) -> np.ndarray:
        toks = normalize(text).split()
        if not toks:
            return np.zeros((0, self.width))
        return np.stack([self._token(t) for t in toks])

    def sentence_embed(self, text: str) -> np.ndarray:
        toks = self.token_embed(text)
        if len(toks) == 0:
            return np.zeros(self.width)
        return toks.mean(axis=0)


class OneHotProvider:
    """Orthonormal one-hot vector per distinct lowercased word (used to sanity-check BertScore)."""

    def __init__(self, width: int = 4096):
        self.width = width
        self._index: dict[str, int] = {}

    def _id(self, word: str) -> int:
        if word not in self._index:
            if len(self._index) >= self.width:
                raise ValueError("OneHotProvider vocabulary exhausted")
            self._index[word] = len(self._index)
        return self._index[word]

    def token_embed(self, text: str) -> np.ndarray:
        toks = normalize(text).split()
        out = np.zeros((len(toks), self.width))
        for i, t in enumerate(toks):
            out[i, self._id(t)] = 1.0
        return out

    def sentence_embed(self, text: str) -> np.ndarray:
        return self.token_embed(text).sum(axis=0)


class FixedProvider:
    """Lookup-table provider for fixtures: text -> sentence vector, text -> token matrix."""

    def __init__(self, sentences: dict | None = None, tokens: dict | None = None):
        self.sentences = {k: np.asarray(v, dtype=np.float64) for k, v in (sentences or {}).items()}
        self.tokens = {k: np.atleast_2d(np.asarray(v, dtype=np.float64)) for k, v in (tokens or {}).items()}
        any_vec = next(iter(self.sentences.values()), None)
        self.width = len(any_vec) if any_vec is not None else 0

    def sentence_embed(self, text):
        return self.sentences[text]

    def token_embed(self, text):
        return self.tokens[text]


class SentenceTransformerProvider:
    """Wraps a sentence-transformers checkpoint (loaded lazily, optional dependency)."""

    def __init__(self, model_name: str = "sentence-transformers/paraphrase-mpnet-base-v2"):
        from sentence_transformers import SentenceTransformer

        self.model = SentenceTransformer(model_name)
        self.width = self.model.get_sentence_embedding_dimension()

    def sentence_embed(self, text):
        return np.asarray(self.model.encode(text), dtype=np.float64)

    def token_embed(self, text):
        out = self.model.encode(text, output_value="token_embeddings")
        return np.asarray(out, dtype=np.float64)[1:-1]


def get_provider(name: str = "hashing", **kw):
    if name == "hashing":
        return HashingProvider(**kw)
    if name == "onehot":
        return OneHotProvider(**kw)
    if name == "sentence-transformers":
        return SentenceTransformerProvider(**kw)
    raise KeyError(f"unknown embedding provider {name!r}")
