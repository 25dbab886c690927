"""Position-wise "cipher translation" model with closed-form gradients.

Initialization scheme (deterministic for a given seed):

* ``E_in ~ N(0, 1)`` of shape ``V x d`` and ``W ~ N(0, 1/d)`` of shape ``d x h``
  are drawn from ``numpy.random.default_rng(seed)`` in that order.
* Latents are ``z_i = W^T E_in[id_i]``.
* ``E_out[(j + k) mod V] = scale * z_j / |z_j|`` where ``z_j`` is the latent of
  token ``j``. By Cauchy-Schwarz the logit row of ``(j + k) mod V`` is the unique
  maximum whenever no two latents are parallel, so greedy decoding is exactly the
  shift-by-``k`` cipher.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass

import numpy as np

from .gateway import (EmptyInputError, EncoderLatents, ModelAdapter, VocabTable,
                      require_nonempty)
from .tokenizer import MARKER, SubwordTokenizer, TokenizedText


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True, eq=False)
class ToyCipherModel:
    E_in: np.ndarray
    W: np.ndarray
    E_out: np.ndarray
    shift: int
    temperature: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        for name in ("E_in", "W", "E_out"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.setflags(write=False)

    @classmethod
    def create(cls, vocab_size: int, dim: int = 32, hidden: int = 32, shift: int = 1,
               temperature: float = 1.0, seed: int = 0, scale: float = 1.0) -> "ToyCipherModel":
        rng = np.random.default_rng(seed)
        E_in = rng.normal(size=(vocab_size, dim))
        W = rng.normal(size=(dim, hidden)) / np.sqrt(dim)
        Z = E_in @ W
        Z_unit = Z / np.linalg.norm(Z, axis=1, keepdims=True)
        E_out = np.empty((vocab_size, hidden))
        E_out[(np.arange(vocab_size) + shift) % vocab_size] = scale * Z_unit
        return cls(E_in, W, E_out, shift, temperature)

    @property
    def vocab_size(self) -> int:
        return self.E_in.shape[0]

    @property
    def dim(self) -> int:
        return self.E_in.shape[1]

    @property
    def hidden(self) -> int:
        return self.W.shape[1]

    def _check_ids(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"token id out of range [0, {self.vocab_size})")
        return ids

    def logits_from_latents(self, latents: np.ndarray) -> np.ndarray:
        return latents @ self.E_out.T / self.temperature

    def forward(self, token_ids) -> tuple[np.ndarray, np.ndarray]:
        ids = self._check_ids(token_ids)
        latents = self.E_in[ids] @ self.W
        return latents, self.logits_from_latents(latents)

    def loss_grad_embeddings(self, emb: np.ndarray, ref_ids) -> tuple[float, np.ndarray]:
        """Mean cross-entropy and its gradient w.r.t. the n x d input embeddings."""
        ref = self._check_ids(ref_ids)
        emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
        if emb.shape[0] != ref.shape[0]:
            raise ValueError(f"length mismatch: {emb.shape[0]} source vs {ref.shape[0]} reference positions")
        n = emb.shape[0]
        logits = self.logits_from_latents(emb @ self.W)
        logp = _log_softmax(logits)
        loss = -logp[np.arange(n), ref].mean()
        dlogits = np.exp(logp)
        dlogits[np.arange(n), ref] -= 1.0
        dlogits /= n * self.temperature
        grad = dlogits @ self.E_out @ self.W.T
        return float(loss), grad

    def loss_grad(self, token_ids, ref_ids) -> tuple[float, np.ndarray]:
        ids = self._check_ids(token_ids)
        return self.loss_grad_embeddings(self.E_in[ids], ref_ids)

    def to_dict(self) -> dict:
        return {"shift": self.shift, "temperature": self.temperature,
                "E_in": self.E_in.tolist(), "W": self.W.tolist(), "E_out": self.E_out.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ToyCipherModel":
        return cls(np.array(data["E_in"], dtype=np.float64), np.array(data["W"], dtype=np.float64),
                   np.array(data["E_out"], dtype=np.float64), int(data["shift"]), float(data["temperature"]))


class ToyAdapter(ModelAdapter):
    """Full ModelAdapter over a :class:`ToyCipherModel`.

    ``loss_and_grad`` aligns source and reference position-wise over the common
    prefix (length ``min(n, m)``); source positions past the reference get a zero
    gradient row. ``beam_size`` is accepted for interface parity: the model is
    position-wise, so beam search and greedy decoding coincide.
    """

    def __init__(self, model: ToyCipherModel, tokenizer: SubwordTokenizer,
                 direction: tuple[str, str] = ("en", "xx"), beam_size: int = 1, model_id: str | None = None):
        if model.vocab_size != tokenizer.size:
            raise ValueError(f"model vocab {model.vocab_size} != tokenizer vocab {tokenizer.size}")
        self.model = model
        self.tokenizer = tokenizer
        self.direction = tuple(direction)
        self.beam_size = beam_size
        self.model_id = model_id or f"toy-cipher-k{model.shift}"
        self._vocab = VocabTable(model.E_in, tokenizer.word_initial_mask(), tokenizer.protected_mask())

    def capabilities(self) -> dict[str, bool]:
        return {"translate": True, "encode": True, "loss_grad": True, "vocab": True,
                "decode": True, "encode_vjp": True}

    @property
    def vocab(self) -> VocabTable:
        return self._vocab

    def translate(self, src: TokenizedText) -> TokenizedText:
        return self.decode_from_latents(self.encode(src))

    def encode(self, src: TokenizedText) -> EncoderLatents:
        require_nonempty(src)
        latents, _ = self.model.forward(src.token_ids)
        return EncoderLatents(latents, len(src))

    def decode_from_latents(self, z: EncoderLatents) -> TokenizedText:
        z.check_finite()
        ids = np.argmax(self.model.logits_from_latents(z.values), axis=1)
        return self.tokenizer.from_ids(ids.tolist(), lang=self.direction[1])

    def token_logprobs(self, src: TokenizedText) -> np.ndarray:
        _, logits = self.model.forward(src.token_ids)
        return _log_softmax(logits)

    def loss_and_grad(self, src: TokenizedText, ref_target: TokenizedText) -> tuple[float, np.ndarray]:
        require_nonempty(src)
        if len(ref_target) == 0:
            raise EmptyInputError("empty reference")
        m = min(len(src), len(ref_target))
        emb = self.model.E_in[np.asarray(src.token_ids, dtype=np.int64)]
        loss, g = self.model.loss_grad_embeddings(emb[:m], ref_target.token_ids[:m])
        grad = np.zeros_like(emb)
        grad[:m] = g
        return loss, grad

    def encode_vjp(self, src: TokenizedText, grad_latents: np.ndarray) -> np.ndarray:
        grad_latents = np.asarray(grad_latents, dtype=np.float64)
        if grad_latents.shape != (len(src), self.model.hidden):
            raise ValueError("latent gradient shape mismatch")
        return grad_latents @ self.model.W.T

    def to_dict(self) -> dict:
        return {"format": "advmt-toy/1", "direction": list(self.direction), "beam_size": self.beam_size,
                "model": self.model.to_dict(), "tokenizer": self.tokenizer.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "ToyAdapter":
        return cls(ToyCipherModel.from_dict(data["model"]), SubwordTokenizer.from_dict(data["tokenizer"]),
                   tuple(data.get("direction", ("en", "xx"))), int(data.get("beam_size", 1)))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ToyAdapter":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class TranslateOnly(ModelAdapter):
    """Wraps an adapter and hides everything but ``translate`` (black-box view)."""

    def __init__(self, inner: ModelAdapter):
        self.inner = inner
        self.tokenizer = inner.tokenizer
        self.direction = inner.direction
        self.model_id = inner.model_id

    def translate(self, src):
        return self.inner.translate(src)


def make_toy(shift: int = 1, seed: int = 0, dim: int = 32, hidden: int = 32, temperature: float = 1.0,
             tokenizer: SubwordTokenizer | None = None, direction=("en", "xx")) -> ToyAdapter:
    tok = tokenizer or SubwordTokenizer.default()
    model = ToyCipherModel.create(tok.size, dim=dim, hidden=hidden, shift=shift, temperature=temperature, seed=seed)
    return ToyAdapter(model, tok, direction)


def make_toy_pair(shift: int = 1, seed: int = 0, dim: int = 32, hidden: int = 32, temperature: float = 1.0,
                  tokenizer: SubwordTokenizer | None = None) -> tuple[ToyAdapter, ToyAdapter]:
    """Forward cipher and its inverse (shift ``-k``, mirrored direction)."""
    fwd = make_toy(shift, seed, dim, hidden, temperature, tokenizer)
    rev = make_toy(-shift, seed + 1, dim, hidden, temperature, fwd.tokenizer, direction=fwd.direction[::-1])
    return fwd, rev


def toy_corpus(adapter: ToyAdapter, n: int, seed: int = 0, direction_seed: int = 123,
               min_words: int = 4, max_words: int = 12) -> list[dict]:
    """Synthetic (src, ref) pairs from a two-domain mixture.

    Whole words of the vocabulary are ranked by the projection of their latent onto
    a fixed random direction (``direction_seed``). The bottom 35% are in-domain: the
    reference agrees with the cipher. The top 35% are out-of-domain: the reference
    replaces their translation with a different token. Each sentence draws its
    out-of-domain rate from Beta(0.5, 0.5), so sentence BLEU varies over [0, 1] and
    is recoverable from mean-pooled encoder latents.
    """
    rng = random.Random(seed)
    tok = adapter.tokenizer
    words = sorted({tok.body(i) for i in range(tok.size)
                    if tok.is_initial(i) and tok.body(i).isalpha() and len(tok.body(i)) > 2
                    and tok.body(i).islower()})
    Z = adapter.model.E_in @ adapter.model.W
    u = np.random.default_rng(direction_seed).normal(size=Z.shape[1])
    proj = np.array([Z[tok.token_id(MARKER + w)] @ u for w in words])
    lo, hi = np.quantile(proj, [0.35, 0.65])
    easy = [w for w, p in zip(words, proj) if p < lo]
    hard = [w for w, p in zip(words, proj) if p > hi]
    hard_set = set(hard)
    out = []
    for _ in range(n):
        length = rng.randint(min_words, max_words)
        rate = rng.betavariate(0.5, 0.5)
        sent = [rng.choice(hard) if rng.random() < rate else rng.choice(easy) for _ in range(length)]
        sent[0] = sent[0].capitalize()
        src_text = " ".join(sent) + "."
        src = adapter.tokenize(src_text)
        ref_ids = list(adapter.translate(src).token_ids)
        for i, (a, b) in enumerate(src.spans):
            if src.is_word_initial[i] and src_text[a:b].lower() in hard_set:
                ref_ids[i] = (ref_ids[i] + 1 + rng.randrange(tok.size - 1)) % tok.size
        out.append({"src": src_text, "ref": tok.detokenize(ref_ids)})
    return out
