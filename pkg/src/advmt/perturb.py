"""Black-box attacks: synthetic noise (typos, omissions, insertions, swaps, shuffles),
random character swaps, prefix insertion and back-translation divergence search.

Every synthetic edit is logged with enough payload to be replayed exactly with
:func:`replay`.
"""
from __future__ import annotations

import json
import logging
import math
import random
import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources

from .gateway import ModelAdapter, back_translate
from .metrics import chrf, metric_value
from .records import AttackRecord

log = logging.getLogger(__name__)

OP_KINDS = ("keyboard_typo", "omit_char", "insert_char", "swap_adjacent_chars",
            "shuffle_word_chars", "swap_words", "full_char_shuffle")
DEFAULT_MIX = {k: 1.0 for k in OP_KINDS if k != "full_char_shuffle"}
BUDGET_MODES = ("fraction_of_words", "fraction_of_chars", "max_operations")

_TRAILING_PUNCT = re.compile(r"[^\w]+$")


@dataclass
class PerturbBudget:
    mode: str = "fraction_of_words"
    value: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in BUDGET_MODES:
            raise ValueError(f"mode must be one of {BUDGET_MODES}")
        if self.value < 0:
            raise ValueError("budget value must be >= 0")
        if self.mode != "max_operations" and self.value > 1:
            raise ValueError("fraction budgets must lie in [0, 1]")


@dataclass
class PerturbOp:
    kind: str
    word: int
    char: int | None = None
    new: str | None = None
    other: int | None = None
    positions: list[int] | None = None
    perm: list[int] | None = None
    skipped: str | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class PerturbResult:
    x: str
    x_att: str
    ops: list[PerturbOp] = field(default_factory=list)

    @property
    def op_log(self) -> list[dict]:
        return [op.as_dict() for op in self.ops]


@lru_cache(maxsize=8)
def load_layout(path: str | None = None) -> dict[str, tuple[str, ...]]:
    if path is None:
        text = resources.files("advmt.data").joinpath("qwerty.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return {k: tuple(v) for k, v in json.loads(text).items()}


def keyboard_neighbors(ch: str, layout=None) -> tuple[str, ...]:
    layout = layout or load_layout()
    near = layout.get(ch.lower(), ())
    return tuple(c.upper() for c in near) if ch.isupper() else near


def keyboard_typo(word: str, index: int, layout=None, rng: random.Random | None = None) -> str:
    """Replace ``word[index]`` by a physically adjacent key; unchanged (and logged) if it has none."""
    if not 0 <= index < len(word):
        raise IndexError(f"index {index} out of range for {word!r}")
    near = keyboard_neighbors(word[index], layout)
    if not near:
        log.info("keyboard_typo skipped: %r has no neighbors in layout", word[index])
        return word
    ch = (rng or random.Random(0)).choice(near)
    return word[:index] + ch + word[index + 1:]


class _Words:
    """Whitespace split that keeps the original separators for exact reassembly."""

    def __init__(self, text: str):
        self.parts = re.split(r"(\s+)", text)
        self.index = [i for i, p in enumerate(self.parts) if p and not p.isspace()]

    def __len__(self):
        return len(self.index)

    def __getitem__(self, k: int) -> str:
        return self.parts[self.index[k]]

    def __setitem__(self, k: int, value: str):
        self.parts[self.index[k]] = value

    def text(self) -> str:
        return "".join(self.parts)


def _core_len(word: str) -> int:
    m = _TRAILING_PUNCT.search(word)
    core = len(word) - (len(m.group(0)) if m else 0)
    return core if core > 0 else len(word)


def apply_op(words: _Words, op: PerturbOp):
    if op.skipped:
        return
    w = words[op.word]
    if op.kind in ("keyboard_typo",):
        words[op.word] = w[:op.char] + op.new + w[op.char + 1:]
    elif op.kind == "omit_char":
        words[op.word] = w[:op.char] + w[op.char + 1:]
    elif op.kind == "insert_char":
        words[op.word] = w[:op.char] + op.new + w[op.char:]
    elif op.kind == "swap_adjacent_chars":
        c = op.char
        words[op.word] = w[:c] + w[c + 1] + w[c] + w[c + 2:]
    elif op.kind in ("shuffle_word_chars", "full_char_shuffle"):
        chars = list(w)
        for pos, src in zip(op.positions, op.perm):
            chars[pos] = w[op.positions[src]]
        words[op.word] = "".join(chars)
    elif op.kind == "swap_words":
        words[op.word], words[op.other] = words[op.other], w
    else:
        raise ValueError(f"unknown op kind {op.kind!r}")


def replay(src: str, ops) -> str:
    """Re-apply a logged op sequence (PerturbOp or dicts) to the original sentence."""
    words = _Words(src)
    for op in ops:
        apply_op(words, op if isinstance(op, PerturbOp) else PerturbOp(**op))
    return words.text()


def _make_op(kind: str, words: _Words, w: int, c: int | None, rng: random.Random, layout) -> PerturbOp:
    word = words[w]
    if c is None:
        c = rng.randrange(len(word))
    if kind == "keyboard_typo":
        near = keyboard_neighbors(word[c], layout)
        if not near:
            return PerturbOp(kind, w, c, skipped=f"no neighbors for {word[c]!r}")
        return PerturbOp(kind, w, c, new=rng.choice(near))
    if kind == "omit_char":
        if len(word) < 2:
            return PerturbOp(kind, w, c, skipped="word too short")
        return PerturbOp(kind, w, c)
    if kind == "insert_char":
        pos = rng.randrange(len(word) + 1)
        anchor = word[min(pos, len(word) - 1)]
        pool = sorted({ch for ch in word if ch.isalpha()} | set(keyboard_neighbors(anchor, layout)))
        if not pool:
            return PerturbOp(kind, w, pos, skipped="no insertion alphabet")
        return PerturbOp(kind, w, pos, new=rng.choice(pool))
    if kind == "swap_adjacent_chars":
        if len(word) < 2:
            return PerturbOp(kind, w, c, skipped="word too short")
        return PerturbOp(kind, w, min(c, len(word) - 2))
    if kind == "shuffle_word_chars":
        core = _core_len(word)
        if core < 2:
            return PerturbOp(kind, w, skipped="word too short")
        size = rng.randint(2, core)
        positions = sorted(rng.sample(range(core), size))
        perm = list(range(size))
        rng.shuffle(perm)
        return PerturbOp(kind, w, positions=positions, perm=perm)
    if kind == "full_char_shuffle":
        core = _core_len(word)
        perm = list(range(core))
        rng.shuffle(perm)
        return PerturbOp(kind, w, positions=list(range(core)), perm=perm)
    if kind == "swap_words":
        if len(words) < 2:
            return PerturbOp(kind, w, skipped="single-word sentence")
        other = rng.choice([k for k in range(len(words)) if k != w])
        return PerturbOp(kind, w, other=other)
    raise ValueError(f"unknown op kind {kind!r}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def synthetic_attack(src: str, budget: PerturbBudget, op_mix: dict[str, float] | None = None,
                     layout=None) -> PerturbResult:
    """Apply randomly sampled perturbations until the budget is spent; deterministic per seed."""
    mix = DEFAULT_MIX if op_mix is None else op_mix
    kinds = [k for k, w in mix.items() if w > 0]
    if any(w < 0 for w in mix.values()) or not kinds:
        raise ValueError("op_mix weights must be non-negative and not all zero")
    unknown = set(mix) - set(OP_KINDS)
    if unknown:
        raise ValueError(f"unknown op kinds {sorted(unknown)}")
    words = _Words(src)
    if len(words) == 0:
        raise ValueError("empty input")
    rng = random.Random(budget.seed)
    weights = [mix[k] for k in kinds]

    if budget.mode == "fraction_of_words":
        # shuffled prefix, so a larger budget extends the edits of a smaller one
        order = list(range(len(words)))
        rng.shuffle(order)
        targets = [(w, None) for w in order[:_round_half_up(budget.value * len(words))]]
    else:
        if budget.mode == "fraction_of_chars":
            n_ops = _round_half_up(budget.value * sum(len(words[k]) for k in range(len(words))))
        else:
            n_ops = int(budget.value)
        targets = [None] * n_ops

    ops = []
    for t in targets:
        kind = rng.choices(kinds, weights)[0]
        if t is None:
            # char site uniform over the current sentence
            sizes = [len(words[k]) for k in range(len(words))]
            site = rng.randrange(sum(sizes))
            w = 0
            while site >= sizes[w]:
                site -= sizes[w]
                w += 1
            t = (w, site)
        op = _make_op(kind, words, t[0], t[1], rng, layout)
        apply_op(words, op)
        ops.append(op)
    return PerturbResult(src, words.text(), ops)


def char_swap_attack(src: str, budget: PerturbBudget) -> PerturbResult:
    """Uniformly random adjacent-character swaps inside words."""
    return synthetic_attack(src, budget, {"swap_adjacent_chars": 1.0})


def _as_record(name: str, res: PerturbResult, model: ModelAdapter | None, hyperparams: dict,
               ref=None, seed=None, y=None) -> AttackRecord:
    y_text = y_att = ""
    model_id = None
    if model is not None:
        y_text = y if y is not None else model.translate(model.tokenize(res.x)).text
        y_att = y_text if res.x_att == res.x else model.translate(model.tokenize(res.x_att)).text
        model_id = model.model_id
    return AttackRecord(name, res.x, res.x_att, y_text, y_att, hyperparams=hyperparams, edit_log=res.op_log,
                        ref=ref, seed=seed, model_id=model_id, stop_reason="budget")


def prefix_attack(src: str, model: ModelAdapter, prefix_pool, k: int = 1, metric: str = "chrf",
                  provider=None, ref: str | None = None) -> AttackRecord:
    """Greedily prepend up to ``k`` pool tokens, each time the one minimizing sim(Y, Y_att)."""
    pool = list(prefix_pool)
    if not pool:
        raise ValueError("prefix pool is empty")
    y = model.translate(model.tokenize(src)).text
    prefix: list[str] = []
    best_sim = metric_value(metric, y, y, provider)
    steps = []
    for _ in range(k):
        choice = None
        for tok in pool:
            cand = " ".join(prefix + [tok, src])
            sim = metric_value(metric, y, model.translate(model.tokenize(cand)).text, provider)
            if sim < best_sim and (choice is None or sim < choice[1]):
                choice = (tok, sim)
        if choice is None:
            break
        prefix.append(choice[0])
        best_sim = choice[1]
        steps.append({"token": choice[0], "sim_output": choice[1]})
    x_att = " ".join(prefix + [src]) if prefix else src
    y_att = model.translate(model.tokenize(x_att)).text if prefix else y
    return AttackRecord("prefix", src, x_att, y, y_att, hyperparams={"k": k, "metric": metric, "pool_size": len(pool)},
                        edit_log=steps, ref=ref, model_id=model.model_id,
                        stop_reason="budget" if len(prefix) == k else "no_improving_candidate",
                        meta={"prefix": prefix})


def roundtrip_divergence(text: str, model: ModelAdapter, reverse: ModelAdapter) -> float:
    """``1 - chrF(text, back_translate(translate(text)))``."""
    tgt = model.translate(model.tokenize(text))
    back = back_translate(tgt, reverse)
    return 1.0 - chrf(back.text, text)


def swls_attack(src: str, model: ModelAdapter, reverse_model: ModelAdapter, budget: int = 1,
                candidates: int = 16, seed: int = 0, op_mix: dict[str, float] | None = None,
                ref: str | None = None) -> AttackRecord:
    """Hill climbing over single-word synthetic edits, maximizing round-trip divergence.

    Each of at most ``budget`` steps scores ``candidates`` sampled single-operation
    variants of the current sentence and moves to the best one only if it strictly
    beats the current score.
    """
    rng = random.Random(seed)
    current = src
    score = roundtrip_divergence(src, model, reverse_model)
    edits = []
    stop = "budget"
    for _ in range(budget):
        best = None
        for _ in range(candidates):
            res = synthetic_attack(current, PerturbBudget("max_operations", 1, rng.randrange(2 ** 31)), op_mix)
            if res.x_att == current:
                continue
            s = roundtrip_divergence(res.x_att, model, reverse_model)
            if best is None or s > best[0]:
                best = (s, res)
        if best is None or not best[0] > score:
            stop = "no_improving_candidate"
            break
        score, res = best
        current = res.x_att
        edits.append({"ops": res.op_log, "score": score})
    y = model.translate(model.tokenize(src)).text
    y_att = model.translate(model.tokenize(current)).text if current != src else y
    return AttackRecord("swls", src, current, y, y_att, hyperparams={"budget": budget, "candidates": candidates},
                        edit_log=edits, ref=ref, seed=seed, model_id=model.model_id, stop_reason=stop,
                        meta={"roundtrip_divergence": score})
