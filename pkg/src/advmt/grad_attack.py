"""White-box token-flip attack driven by a first-order Taylor estimate of the adversarial loss.

The adversarial loss is ``L_adv = -J``, the negated mean NLL of an anchored
translation. Replacing the embedding ``e_i`` with ``e_v`` changes ``L_adv`` by roughly
``(e_v - e_i) . grad_i``; each step applies the allowed flip with the most negative
estimate and then recomputes the gradient.
"""
from __future__ import annotations

import string
from dataclasses import asdict, dataclass, field

import numpy as np

from .gateway import EmptyInputError, ModelAdapter, VocabTable
from .records import AttackRecord
from .tokenizer import TokenizedText

COSINE_RULES = ("max_distance", "min_distance")
LOSS_MODES = ("vs_model_translation", "vs_reference")
RANKINGS = ("score", "gain")
TIE_RTOL = 1e-12


@dataclass
class AttackConstraints:
    """Replacement constraints.

    ``cosine_threshold`` bounds the cosine distance ``1 - cos(e_old, e_new)``, which
    lies in [0, 2]. With ``cosine_rule="max_distance"`` (default) a replacement must
    be at most that far from the token it replaces; ``"min_distance"`` instead
    requires it to be at least that far.
    """

    cosine_threshold: float = 1.0
    cosine_rule: str = "max_distance"
    one_flip_per_position: bool = True
    respect_word_initial_partition: bool = True
    protect_first_last: bool = True
    protect_masked: bool = True

    def __post_init__(self):
        if not 0.0 <= self.cosine_threshold <= 2.0:
            raise ValueError("cosine_threshold is a cosine distance and must lie in [0, 2]")
        if self.cosine_rule not in COSINE_RULES:
            raise ValueError(f"cosine_rule must be one of {COSINE_RULES}")

    def cosine_ok(self, distance):
        if self.cosine_rule == "max_distance":
            return distance <= self.cosine_threshold
        return distance >= self.cosine_threshold


@dataclass
class GradAttackConfig:
    max_flips: int = 1
    loss_mode: str = "vs_model_translation"
    level: str = "token"
    constraints: AttackConstraints = field(default_factory=AttackConstraints)
    ranking: str = "score"  # "gain" ranks by (e_new - e_old) . grad instead of e_new . grad

    def __post_init__(self):
        if self.max_flips < 0:
            raise ValueError("max_flips must be >= 0")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.level not in ("token", "character"):
            raise ValueError("level must be 'token' or 'character'")
        if self.ranking not in RANKINGS:
            raise ValueError(f"ranking must be one of {RANKINGS}")
        if isinstance(self.constraints, dict):
            self.constraints = AttackConstraints(**self.constraints)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlipCandidate:
    position: int
    new_token: int
    old_token: int
    score: float  # e_new . grad_i
    gain: float  # (e_new - e_old) . grad_i, the first-order change of L_adv


def _unit_rows(E: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    return E / np.where(norms == 0, 1.0, norms)


def cosine_distance(E: np.ndarray, a, b):
    U = _unit_rows(np.atleast_2d(E))
    return 1.0 - np.sum(U[a] * U[b], axis=-1)


def protected_positions(current_ids, vocab: VocabTable, constraints: AttackConstraints) -> set[int]:
    n = len(current_ids)
    out = set()
    if constraints.protect_first_last and n:
        out.update({0, n - 1})
    if constraints.protect_masked:
        out.update(i for i, t in enumerate(current_ids) if vocab.protected_mask[t])
    return out


def allowed_mask(current_ids, vocab: VocabTable, constraints: AttackConstraints, flipped=()) -> np.ndarray:
    """Boolean n x |V| matrix of replacements satisfying every constraint."""
    ids = np.asarray(current_ids, dtype=np.int64)
    n = len(ids)
    allowed = np.ones((n, vocab.size), dtype=bool)
    allowed[np.arange(n), ids] = False
    blocked = protected_positions(ids, vocab, constraints)
    if constraints.one_flip_per_position:
        blocked |= set(flipped)
    if blocked:
        allowed[sorted(blocked)] = False
    if constraints.protect_masked:
        allowed[:, vocab.protected_mask] = False
    if constraints.respect_word_initial_partition:
        wi = vocab.word_initial_mask
        allowed &= wi[None, :] == wi[ids][:, None]
    U = _unit_rows(vocab.embeddings)
    dist = 1.0 - U[ids] @ U.T
    allowed &= constraints.cosine_ok(dist)
    return allowed


def improving_mask(gain: np.ndarray) -> np.ndarray:
    """Pairs whose first-order change beats keeping the current token by more than the tie tolerance."""
    tol = TIE_RTOL * (1.0 + float(np.abs(gain).max(initial=0.0)))
    return gain < -tol


def pick_min(objective: np.ndarray, allowed: np.ndarray):
    """Row-major (lowest row, then lowest column) argmin of ``objective`` over ``allowed``.

    Values within a relative ``1e-12`` of the minimum count as tied. Returns ``None``
    when nothing is allowed.
    """
    if not allowed.any():
        return None
    masked = np.where(allowed, objective, np.inf)
    best = masked.min()
    tol = TIE_RTOL * (1.0 + float(np.abs(objective[allowed]).max()))
    flat = np.flatnonzero((masked <= best + tol).ravel())[0]
    return np.unravel_index(flat, objective.shape)


def rank_and_pick(scores: np.ndarray, current: np.ndarray, allowed: np.ndarray, ranking: str = "score"):
    """Choose among allowed, strictly improving pairs.

    ``scores[i, v] = e_v . g_i``; ``current[i]`` is the score of the token now at row i.
    ``ranking="score"`` minimizes the raw score, ``"gain"`` the change ``score - current``.
    """
    if ranking not in RANKINGS:
        raise ValueError(f"ranking must be one of {RANKINGS}")
    gain = scores - current[:, None]
    ok = allowed & improving_mask(gain)
    hit = pick_min(scores if ranking == "score" else gain, ok)
    return hit, gain


def select_flip(grad, current_ids, vocab: VocabTable, constraints: AttackConstraints | None = None,
                flipped=(), ranking: str = "score") -> FlipCandidate | None:
    """Best single replacement under the first-order estimate, or ``None`` if nothing improves."""
    constraints = constraints or AttackConstraints()
    grad = np.asarray(grad, dtype=np.float64)
    ids = np.asarray(current_ids, dtype=np.int64)
    if grad.shape != (len(ids), vocab.dim):
        raise ValueError(f"gradient shape {grad.shape} != ({len(ids)}, {vocab.dim})")
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient has non-finite entries")
    scores = grad @ vocab.embeddings.T
    hit, gain = rank_and_pick(scores, scores[np.arange(len(ids)), ids],
                              allowed_mask(ids, vocab, constraints, flipped), ranking)
    if hit is None:
        return None
    i, v = int(hit[0]), int(hit[1])
    return FlipCandidate(i, v, int(ids[i]), float(scores[i, v]), float(gain[i, v]))


def _source(src, model: ModelAdapter) -> TokenizedText:
    if isinstance(src, str):
        return model.tokenize(src)
    if len(src) == 0:
        raise EmptyInputError()
    return src


def _anchor(model: ModelAdapter, y: TokenizedText, ref: str | None, loss_mode: str) -> TokenizedText:
    if loss_mode == "vs_model_translation":
        return y
    if not ref:
        raise ValueError("loss_mode='vs_reference' needs a reference translation")
    return model.target_text(ref)


def token_flip_loop(src: TokenizedText, model: ModelAdapter, grad_fn, max_flips: int,
                    constraints: AttackConstraints, ranking: str = "score"):
    """Shared iterative flip loop; ``grad_fn(cur)`` returns ``(objective, dL_adv/de)``."""
    vocab = model.vocab
    ids = list(src.token_ids)
    cur = src
    flipped: set[int] = set()
    log = []
    stop = "budget"
    for _ in range(max_flips):
        objective, grad = grad_fn(cur)
        cand = select_flip(grad, ids, vocab, constraints, flipped, ranking)
        if cand is None:
            stop = "no_improving_candidate"
            break
        ids[cand.position] = cand.new_token
        flipped.add(cand.position)
        log.append({"position": cand.position, "old": cand.old_token, "new": cand.new_token,
                    "old_token": model.tokenizer.tokens[cand.old_token],
                    "new_token": model.tokenizer.tokens[cand.new_token],
                    "score": cand.score, "gain": cand.gain, "objective_before": objective})
        cur = model.tokenizer.from_ids(ids, lang=src.lang)
    return cur, log, stop


def gradient_attack(src, model: ModelAdapter, config: GradAttackConfig | None = None,
                    ref: str | None = None) -> AttackRecord:
    config = config or GradAttackConfig()
    if config.level == "character":
        return char_grad_attack(src, model, config, ref)
    src = _source(src, model)
    y = model.translate(src)
    anchor = _anchor(model, y, ref, config.loss_mode)

    def grad_fn(cur):
        loss, grad = model.loss_and_grad(cur, anchor)
        return loss, -np.asarray(grad, dtype=np.float64)

    cur, log, stop = token_flip_loop(src, model, grad_fn, config.max_flips, config.constraints, config.ranking)
    y_att = model.translate(cur) if log else y
    return AttackRecord(
        attack_name="gradient", x=src.text, x_att=cur.text if log else src.text, y=y.text, y_att=y_att.text,
        hyperparams=config.as_dict(), edit_log=log, ref=ref, model_id=model.model_id, stop_reason=stop,
        meta={"x_ids": list(src.token_ids), "x_att_ids": list(cur.token_ids), "y_ids": list(y.token_ids),
              "y_att_ids": list(y_att.token_ids), "anchor_ids": list(anchor.token_ids)},
    )


@dataclass
class CharView:
    """Character-level view of a token vocabulary.

    A character's embedding is the mean of the embedding rows of every token whose
    surface form contains it. Only ASCII letters take part in flips.
    """

    chars: list[str]
    embeddings: np.ndarray

    @classmethod
    def from_model(cls, model: ModelAdapter) -> "CharView":
        tok = model.tokenizer
        E = model.vocab.embeddings
        sums: dict[str, np.ndarray] = {}
        counts: dict[str, int] = {}
        for tid in range(tok.size):
            for ch in set(tok.body(tid)):
                if ch in string.ascii_letters:
                    sums[ch] = sums.get(ch, 0) + E[tid]
                    counts[ch] = counts.get(ch, 0) + 1
        chars = sorted(sums)
        return cls(chars, np.stack([sums[c] / counts[c] for c in chars]))

    def index(self, ch: str) -> int:
        return self.chars.index(ch)


def char_candidates(text: str, tokens: TokenizedText, view: CharView, vocab: VocabTable,
                    constraints: AttackConstraints, flipped=()):
    """Candidate character sites: list of (char position, token position, char index), plus allowed matrix."""
    blocked_tok = protected_positions(tokens.token_ids, vocab, constraints)
    sites = []
    for t, (a, b) in enumerate(tokens.spans):
        if t in blocked_tok:
            continue
        for j in range(a, b):
            ch = text[j]
            if ch not in view.chars:
                continue
            if constraints.one_flip_per_position and j in flipped:
                continue
            sites.append((j, t, view.index(ch)))
    if not sites:
        return sites, np.zeros((0, len(view.chars)), dtype=bool)
    cur = np.array([c for _, _, c in sites])
    allowed = np.ones((len(sites), len(view.chars)), dtype=bool)
    allowed[np.arange(len(sites)), cur] = False
    if constraints.respect_word_initial_partition:
        upper = np.array([c.isupper() for c in view.chars])
        allowed &= upper[None, :] == upper[cur][:, None]
    U = _unit_rows(view.embeddings)
    allowed &= constraints.cosine_ok(1.0 - U[cur] @ U.T)
    return sites, allowed


def select_char_flip(text: str, tokens: TokenizedText, grad, view: CharView, vocab: VocabTable,
                     constraints: AttackConstraints, flipped=(), ranking: str = "score"):
    sites, allowed = char_candidates(text, tokens, view, vocab, constraints, flipped)
    if not sites:
        return None
    grad = np.asarray(grad, dtype=np.float64)
    tok_pos = np.array([t for _, t, _ in sites])
    cur = np.array([c for _, _, c in sites])
    G = grad[tok_pos]
    scores = np.einsum("sd,cd->sc", G, view.embeddings)
    hit, gain = rank_and_pick(scores, scores[np.arange(len(sites)), cur], allowed, ranking)
    if hit is None:
        return None
    s, c = int(hit[0]), int(hit[1])
    j, t, old = sites[s]
    return {"position": j, "token_position": t, "old": view.chars[old], "new": view.chars[c],
            "score": float(scores[s, c]), "gain": float(gain[s, c])}


def char_grad_attack(src, model: ModelAdapter, config: GradAttackConfig | None = None,
                     ref: str | None = None) -> AttackRecord:
    """Character-level variant: flips single letters, re-tokenizing after every flip."""
    config = config or GradAttackConfig(level="character")
    src = _source(src, model)
    y = model.translate(src)
    anchor = _anchor(model, y, ref, config.loss_mode)
    view = CharView.from_model(model)
    vocab = model.vocab
    text = src.text
    cur = src
    flipped: set[int] = set()
    log = []
    stop = "budget"
    for _ in range(config.max_flips):
        loss, grad = model.loss_and_grad(cur, anchor)
        flip = select_char_flip(text, cur, -np.asarray(grad), view, vocab, config.constraints, flipped,
                                config.ranking)
        if flip is None:
            stop = "no_improving_candidate"
            break
        j = flip["position"]
        text = text[:j] + flip["new"] + text[j + 1:]
        flipped.add(j)
        flip["objective_before"] = loss
        log.append(flip)
        cur = model.tokenize(text)
    y_att = model.translate(cur) if log else y
    hp = config.as_dict()
    hp["level"] = "character"
    return AttackRecord(
        attack_name="char_gradient", x=src.text, x_att=text, y=y.text, y_att=y_att.text, hyperparams=hp,
        edit_log=log, ref=ref, model_id=model.model_id, stop_reason=stop,
        meta={"y_att_ids": list(y_att.token_ids), "anchor_ids": list(anchor.token_ids)},
    )


def audit_token_record(record: AttackRecord, vocab: VocabTable, constraints: AttackConstraints) -> list[str]:
    """Constraint violations found in a token-level record's edit log (empty list = clean)."""
    violations = []
    ids = list(record.meta["x_ids"])
    n = len(ids)
    seen = set()
    U = _unit_rows(vocab.embeddings)
    for e in record.edit_log:
        i, old, new = e["position"], e["old"], e["new"]
        if ids[i] != old:
            violations.append(f"log mismatch at {i}")
        dist = 1.0 - float(U[old] @ U[new])
        if not constraints.cosine_ok(dist):
            violations.append(f"cosine distance {dist:.4f} at {i}")
        if constraints.one_flip_per_position and i in seen:
            violations.append(f"position {i} flipped twice")
        if constraints.protect_first_last and i in (0, n - 1):
            violations.append(f"first/last position {i} flipped")
        if constraints.protect_masked and (vocab.protected_mask[old] or vocab.protected_mask[new]):
            violations.append(f"protected token at {i}")
        if (constraints.respect_word_initial_partition
                and vocab.word_initial_mask[old] != vocab.word_initial_mask[new]):
            violations.append(f"partition crossed at {i}")
        seen.add(i)
        ids[i] = new
    if ids != list(record.meta["x_att_ids"]):
        violations.append("edit log does not reproduce x_att")
    return violations
