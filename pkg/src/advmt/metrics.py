"""Text similarity metrics used for both sim(X, X_att) and sim(Y, Y_att).

Word-level metrics (BLEU, METEOR, WER) normalize with Unicode NFC + lowercasing
and split on whitespace. chrF keeps case and drops whitespace before n-gram
extraction.
"""
from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

SMOOTH_EPS = 1e-9
CHRF_ORDER = 6
CHRF_BETA = 2.0
METEOR_ALPHA = 0.9

METRIC_NAMES = ("bleu", "chrf", "meteor", "wer", "paraphrase", "bertscore")
# distances: lower is more similar
DISTANCE_METRICS = frozenset({"wer"})


def normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text).lower()


def words(text: str) -> list[str]:
    return normalize(text).split()


def ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu_stats(candidate: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4):
    """Clipped n-gram matches and candidate n-gram totals for orders 1..max_n."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        max_ref = Counter()
        for ref in references:
            for g, c in ngrams(ref, n).items():
                if c > max_ref[g]:
                    max_ref[g] = c
        matches.append(sum(min(c, max_ref[g]) for g, c in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return matches, totals


def _closest_ref_len(cand_len: int, references) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in references)[1]


def _brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    return 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)


def bleu(candidate: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4,
         smooth_eps: float = SMOOTH_EPS) -> float:
    """Sentence BLEU in [0, 1].

    Orders the candidate is too short to contain are skipped (effective order), and
    zero match counts are replaced by ``smooth_eps`` so the score stays positive
    and finite for any non-empty candidate.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if not references:
        raise ValueError("empty references")
    if len(candidate) == 0:
        return 0.0
    matches, totals = bleu_stats(candidate, references, max_n)
    log_p = 0.0
    orders = 0
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        orders += 1
        log_p += math.log((m if m > 0 else smooth_eps) / t)
    bp = _brevity_penalty(len(candidate), _closest_ref_len(len(candidate), references))
    return min(1.0, bp * math.exp(log_p / orders))


def corpus_bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
                max_n: int = 4) -> float:
    """Unsmoothed corpus BLEU over aggregated n-gram statistics."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    tot_m, tot_t = [0] * max_n, [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("empty references")
        m, t = bleu_stats(cand, refs, max_n)
        tot_m = [a + b for a, b in zip(tot_m, m)]
        tot_t = [a + b for a, b in zip(tot_t, t)]
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
    if min(tot_m) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(tot_m, tot_t)) / max_n
    return _brevity_penalty(c_len, r_len) * math.exp(log_p)


def sentence_bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    return bleu(words(candidate), [words(reference)], max_n)


def _f_beta(p: float, r: float, beta: float) -> float:
    if p == 0.0 and r == 0.0:
        return 0.0
    if p == r:
        return p
    b2 = beta * beta
    return (1 + b2) * p * r / (b2 * p + r)


def chrf_components(candidate: str, reference: str, n: int = CHRF_ORDER,
                    remove_whitespace: bool = True) -> tuple[float, float]:
    """Character n-gram precision and recall, each averaged over the orders it is defined for."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if remove_whitespace:
        candidate = "".join(candidate.split())
        reference = "".join(reference.split())
    if not candidate and not reference:
        raise ValueError("both strings empty")
    p_sum = r_sum = 0.0
    p_orders = r_orders = 0
    for k in range(1, n + 1):
        c, r = ngrams(candidate, k), ngrams(reference, k)
        c_tot, r_tot = sum(c.values()), sum(r.values())
        match = sum((c & r).values())
        if c_tot:
            p_sum += match / c_tot
            p_orders += 1
        if r_tot:
            r_sum += match / r_tot
            r_orders += 1
    p = p_sum / p_orders if p_orders else 0.0
    rec = r_sum / r_orders if r_orders else 0.0
    return p, rec


def chrf(candidate: str, reference: str, n: int = CHRF_ORDER, beta: float = CHRF_BETA,
         remove_whitespace: bool = True) -> float:
    p, r = chrf_components(candidate, reference, n, remove_whitespace)
    return _f_beta(p, r, beta)


def meteor_components(candidate: str, reference: str) -> tuple[float, float]:
    c, r = words(candidate), words(reference)
    if not c or not r:
        return 0.0, 0.0
    match = sum((Counter(c) & Counter(r)).values())
    return match / len(c), match / len(r)


def meteor_unigram(candidate: str, reference: str, alpha: float = METEOR_ALPHA) -> float:
    """Unigram F-mean ``P*R / (alpha*P + (1-alpha)*R)``; no stemming or synonyms."""
    p, r = meteor_components(candidate, reference)
    if p == 0.0 or r == 0.0:
        return 0.0
    if p == r:
        return p
    return p * r / (alpha * p + (1 - alpha) * r)


def edit_distance(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def wer(candidate: str | Sequence[str], reference: str | Sequence[str], level: str = "word") -> float:
    """Levenshtein distance normalized by reference length (word or character level)."""
    if level == "word":
        cand = words(candidate) if isinstance(candidate, str) else list(candidate)
        ref = words(reference) if isinstance(reference, str) else list(reference)
    elif level == "char":
        cand, ref = normalize(candidate), normalize(reference)
    else:
        raise ValueError(f"unknown level {level!r}")
    if len(ref) == 0:
        raise ValueError("empty reference")
    return edit_distance(cand, ref) / len(ref)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.array_equal(u, v) and np.any(u):
        return 1.0
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def paraphrase_similarity(a: str, b: str, provider) -> float:
    return cosine(provider.sentence_embed(a), provider.sentence_embed(b))


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    sims = (A / np.where(na == 0, 1, na)) @ (B / np.where(nb == 0, 1, nb)).T
    same = np.all(A[:, None, :] == B[None, :, :], axis=-1) & (na > 0) & (nb.T > 0)
    return np.where(same, 1.0, np.clip(sims, -1.0, 1.0))


def bert_score(a: str, b: str, provider) -> tuple[float, float, float]:
    """Greedy max-cosine token matching: precision over ``a``'s tokens, recall over ``b``'s."""
    A = provider.token_embed(a)
    B = provider.token_embed(b)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("empty token set")
    sims = cosine_matrix(A, B)
    p = float(sims.max(axis=1).mean())
    r = float(sims.max(axis=0).mean())
    if p == r:
        return p, r, p
    f = 2 * p * r / (p + r) if (p + r) != 0 else 0.0
    return p, r, f


@dataclass
class MetricReport:
    bleu: float
    chrf: float
    meteor: float
    wer: float
    paraphrase_sim: float
    bert_score_f1: float
    bert_score_precision: float
    bert_score_recall: float

    def as_dict(self) -> dict:
        return asdict(self)

    def metric(self, name: str) -> float:
        return {"bleu": self.bleu, "chrf": self.chrf, "meteor": self.meteor, "wer": self.wer,
                "paraphrase": self.paraphrase_sim, "bertscore": self.bert_score_f1}[name]


def full_report(reference: str, candidate: str, provider) -> MetricReport:
    """All six metrics with ``reference`` as the original text and ``candidate`` as the changed one."""
    p, r, f = bert_score(candidate, reference, provider)
    return MetricReport(
        bleu=sentence_bleu(candidate, reference),
        chrf=chrf(candidate, reference),
        meteor=meteor_unigram(candidate, reference),
        wer=wer(candidate, reference),
        paraphrase_sim=paraphrase_similarity(candidate, reference, provider),
        bert_score_f1=f, bert_score_precision=p, bert_score_recall=r,
    )


def metric_value(name: str, reference: str, candidate: str, provider=None) -> float:
    if name == "bleu":
        return sentence_bleu(candidate, reference)
    if name == "chrf":
        return chrf(candidate, reference)
    if name == "meteor":
        return meteor_unigram(candidate, reference)
    if name == "wer":
        return wer(candidate, reference)
    if name == "paraphrase":
        return paraphrase_similarity(candidate, reference, provider)
    if name == "bertscore":
        return bert_score(candidate, reference, provider)[2]
    raise KeyError(f"unknown metric {name!r}")
