"""Whitespace + subword tokenizer with a sentencepiece-style continuation convention.

Word-initial pieces carry a leading ``▁`` marker; continuation pieces carry none.
Every printable ASCII character exists in both forms, so tokenization of ASCII
text never falls back to ``<unk>`` and ``detokenize(tokenize(t)) == t`` for text
with single spaces between words.
"""
from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

MARKER = "▁"
UNK = "<unk>"

_PIECE_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

COMMON_SUFFIXES = ("s", "es", "ed", "ing", "ly", "er", "ers", "est", "tion", "ment", "ness", "al", "on", "en")


def load_stopwords(path: str | None = None) -> frozenset[str]:
    if path is None:
        text = resources.files("advmt.data").joinpath("stopwords.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return frozenset(w.strip().lower() for w in text.split() if w.strip())


def _bundled_words() -> list[str]:
    text = resources.files("advmt.data").joinpath("words.txt").read_text(encoding="utf-8")
    return list(dict.fromkeys(w.strip() for w in text.split() if w.strip()))


@dataclass
class TokenizedText:
    text: str
    token_ids: list[int]
    spans: list[tuple[int, int]]
    is_word_initial: list[bool]
    lang: str | None = None

    def __post_init__(self):
        if not (len(self.token_ids) == len(self.spans) == len(self.is_word_initial)):
            raise ValueError("token_ids, spans and is_word_initial must have equal length")

    def __len__(self):
        return len(self.token_ids)

    def with_lang(self, lang: str | None) -> "TokenizedText":
        return TokenizedText(self.text, list(self.token_ids), list(self.spans), list(self.is_word_initial), lang)


@dataclass
class SubwordTokenizer:
    """Greedy longest-match subword tokenizer over a fixed piece inventory."""

    tokens: list[str]
    stopwords: frozenset[str] = field(default_factory=load_stopwords)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self.unk_id = self._index.get(UNK)
        self._max_len = max(len(t) for t in self.tokens)

    @classmethod
    def default(cls, words: Iterable[str] | None = None, stopwords: frozenset[str] | None = None) -> "SubwordTokenizer":
        """Bundled inventory: ``<unk>``, printable ASCII in both forms, common words and suffixes."""
        words = _bundled_words() if words is None else list(words)
        tokens = [UNK]
        for ch in string.printable:
            if ch.isspace():
                continue
            tokens.append(MARKER + ch)
            tokens.append(ch)
        for w in words:
            for form in (w, w.capitalize()):
                tokens.append(MARKER + form)
        tokens.extend(COMMON_SUFFIXES)
        tokens = list(dict.fromkeys(tokens))
        return cls(tokens, stopwords if stopwords is not None else load_stopwords())

    @classmethod
    def from_corpus(cls, texts: Iterable[str], max_words: int = 300) -> "SubwordTokenizer":
        counts = Counter(m.group(0) for t in texts for m in _PIECE_RE.finditer(t) if m.group(0).isalpha())
        words = [w.lower() for w, _ in counts.most_common(max_words) if len(w) > 1]
        return cls.default(list(dict.fromkeys(_bundled_words() + words)))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def token_id(self, token: str) -> int:
        return self._index[token]

    def is_initial(self, token_id: int) -> bool:
        return self.tokens[token_id].startswith(MARKER)

    def body(self, token_id: int) -> str:
        tok = self.tokens[token_id]
        return tok[1:] if tok.startswith(MARKER) else tok

    def word_initial_mask(self) -> list[bool]:
        return [t.startswith(MARKER) for t in self.tokens]

    def protected_mask(self) -> list[bool]:
        """Punctuation pieces, special tokens and word-initial stop words."""
        mask = []
        for t in self.tokens:
            if t == UNK:
                mask.append(True)
                continue
            body = t[1:] if t.startswith(MARKER) else t
            if not any(c.isalnum() for c in body):
                mask.append(True)
            elif t.startswith(MARKER) and body.lower() in self.stopwords:
                mask.append(True)
            else:
                mask.append(False)
        return mask

    def _segment(self, piece: str, initial: bool) -> list[tuple[int, int, int]]:
        out = []
        pos = 0
        first = True
        while pos < len(piece):
            prefix = MARKER if (first and initial) else ""
            match = None
            for end in range(min(len(piece), pos + self._max_len), pos, -1):
                tid = self._index.get(prefix + piece[pos:end])
                if tid is not None:
                    match = (tid, pos, end)
                    break
            if match is None:
                if self.unk_id is None:
                    raise KeyError(f"character {piece[pos]!r} not in vocabulary")
                match = (self.unk_id, pos, pos + 1)
            out.append(match)
            pos = match[2]
            first = False
        return out

    def tokenize(self, text: str, lang: str | None = None) -> TokenizedText:
        ids, spans, initial = [], [], []
        for m in _PIECE_RE.finditer(text):
            start = m.start()
            is_init = start == 0 or text[start - 1].isspace()
            for k, (tid, a, b) in enumerate(self._segment(m.group(0), is_init)):
                ids.append(tid)
                spans.append((start + a, start + b))
                initial.append(is_init and k == 0)
        return TokenizedText(text, ids, spans, initial, lang)

    def detokenize(self, token_ids: Sequence[int]) -> str:
        parts = []
        for k, tid in enumerate(token_ids):
            tok = self.tokens[int(tid)]
            if tok.startswith(MARKER):
                parts.append(tok[1:] if k == 0 else " " + tok[1:])
            else:
                parts.append(tok)
        return "".join(parts)

    def from_ids(self, token_ids: Sequence[int], lang: str | None = None) -> TokenizedText:
        """Build a TokenizedText whose ids are kept verbatim (no re-segmentation)."""
        ids = [int(t) for t in token_ids]
        text_parts, spans, initial = [], [], []
        pos = 0
        for k, tid in enumerate(ids):
            tok = self.tokens[tid]
            is_init = tok.startswith(MARKER)
            body = tok[1:] if is_init else tok
            if is_init and k > 0:
                text_parts.append(" ")
                pos += 1
            spans.append((pos, pos + len(body)))
            text_parts.append(body)
            pos += len(body)
            initial.append(is_init)
        return TokenizedText("".join(text_parts), ids, spans, initial, lang)

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, data: dict, stopwords: frozenset[str] | None = None) -> "SubwordTokenizer":
        return cls(list(data["tokens"]), stopwords if stopwords is not None else load_stopwords())
