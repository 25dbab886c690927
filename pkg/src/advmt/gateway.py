"""Model contract consumed by every attack, plus the shared error types."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokenizer import SubwordTokenizer, TokenizedText

PROTOCOL_VERSION = "advmt/1"


class GatewayError(RuntimeError):
    """Adapter failure (remote unreachable, malformed output, ...)."""


class CapabilityError(GatewayError):
    pass


class EmptyInputError(GatewayError, ValueError):
    def __init__(self, msg: str = "empty input"):
        super().__init__(msg)


class DirectionError(GatewayError, ValueError):
    pass


class ProtocolError(GatewayError):
    pass


@dataclass
class VocabTable:
    embeddings: np.ndarray
    word_initial_mask: np.ndarray
    protected_mask: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.word_initial_mask = np.asarray(self.word_initial_mask, dtype=bool)
        self.protected_mask = np.asarray(self.protected_mask, dtype=bool)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a |V| x d matrix")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite entries")
        n = self.embeddings.shape[0]
        if self.word_initial_mask.shape != (n,) or self.protected_mask.shape != (n,):
            raise ValueError("masks must have length |V|")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class EncoderLatents:
    values: np.ndarray
    source_len: int

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.shape[0] < 1:
            raise ValueError("latents need at least one position")

    def check_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latents contain non-finite entries")


class ModelAdapter:
    """Behavioral contract for a translation model.

    Subclasses implement the capabilities they support; the rest raise
    :class:`CapabilityError`. All methods operate on :class:`TokenizedText`
    so token ids survive round trips without re-segmentation.
    """

    tokenizer: SubwordTokenizer
    direction: tuple[str, str] = ("src", "tgt")
    model_id: str = "model"

    def capabilities(self) -> dict[str, bool]:
        return {"translate": True, "encode": False, "loss_grad": False, "vocab": False,
                "decode": False, "encode_vjp": False}

    @property
    def vocab(self) -> VocabTable:
        raise CapabilityError("vocab unsupported")

    def tokenize(self, text: str) -> TokenizedText:
        src = self.tokenizer.tokenize(text, lang=self.direction[0])
        if len(src) == 0:
            raise EmptyInputError()
        return src

    def target_text(self, text: str) -> TokenizedText:
        return self.tokenizer.tokenize(text, lang=self.direction[1])

    def translate(self, src: TokenizedText) -> TokenizedText:
        raise NotImplementedError

    def loss_and_grad(self, src: TokenizedText, ref_target: TokenizedText) -> tuple[float, np.ndarray]:
        raise CapabilityError("gradients unsupported")

    def encode(self, src: TokenizedText) -> EncoderLatents:
        raise CapabilityError("encode unsupported")

    def decode_from_latents(self, z: EncoderLatents) -> TokenizedText:
        raise CapabilityError("decode_from_latents unsupported")

    def encode_vjp(self, src: TokenizedText, grad_latents: np.ndarray) -> np.ndarray:
        """Pull a latent-space gradient back to the input embeddings (n x d)."""
        raise CapabilityError("encoder gradients unsupported")


def require_nonempty(src: TokenizedText):
    if len(src) == 0:
        raise EmptyInputError()


def back_translate(tgt: TokenizedText, reverse: ModelAdapter) -> TokenizedText:
    if tgt.lang is not None and reverse.direction[0] != tgt.lang:
        raise DirectionError(
            f"reverse model translates {reverse.direction[0]}->{reverse.direction[1]}, text is {tgt.lang}")
    return reverse.translate(tgt)


def check_mirror(forward: ModelAdapter, reverse: ModelAdapter):
    if tuple(reverse.direction) != tuple(forward.direction)[::-1]:
        raise DirectionError(f"{reverse.direction} is not the mirror of {forward.direction}")
