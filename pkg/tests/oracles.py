"""Independent reference implementations used only by the tests.

Each one is written from the definition, by enumeration, without sharing code
with the package.
"""
from __future__ import annotations

import math
import re
from fractions import Fraction
from functools import lru_cache


def _grams(seq, n):
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def _occurrences(seq, gram):
    n = len(gram)
    return sum(1 for i in range(len(seq) - n + 1) if tuple(seq[i:i + n]) == gram)


def bleu(cand, refs, max_n=4, eps=1e-9):
    if not cand:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        cg = _grams(cand, n)
        if not cg:
            continue
        matched = 0
        for g in set(cg):
            matched += min(cg.count(g), max(_occurrences(r, g) for r in refs))
        precisions.append(Fraction(matched, len(cg)) if matched else eps / len(cg))
    geo = math.prod(float(p) for p in precisions) ** (1.0 / len(precisions))
    ref_len = sorted((abs(len(r) - len(cand)), len(r)) for r in refs)[0][1]
    bp = 1.0 if len(cand) >= ref_len else math.exp(1 - ref_len / len(cand))
    return min(1.0, bp * geo)


def unigram_precision(cand, ref) -> Fraction:
    matched = sum(min(cand.count(w), ref.count(w)) for w in set(cand))
    return Fraction(matched, len(cand))


def chrf(cand: str, ref: str, n=6, beta=2.0):
    c = re.sub(r"\s+", "", cand)
    r = re.sub(r"\s+", "", ref)
    ps, rs = [], []
    for k in range(1, n + 1):
        cg, rg = _grams(c, k), _grams(r, k)
        match = sum(min(cg.count(g), rg.count(g)) for g in set(cg) | set(rg))
        if cg:
            ps.append(match / len(cg))
        if rg:
            rs.append(match / len(rg))
    p = sum(ps) / len(ps) if ps else 0.0
    rc = sum(rs) / len(rs) if rs else 0.0
    if p + rc == 0:
        return 0.0
    b2 = beta ** 2
    return (1 + b2) * p * rc / (b2 * p + rc)


def meteor(cand: str, ref: str, alpha=0.9):
    c, r = cand.lower().split(), ref.lower().split()
    if not c or not r:
        return 0.0
    m = sum(min(c.count(w), r.count(w)) for w in set(c))
    if m == 0:
        return 0.0
    p, rc = m / len(c), m / len(r)
    return p * rc / (alpha * p + (1 - alpha) * rc)


def edit_distance(a, b) -> int:
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def wer(cand: str, ref: str):
    c, r = cand.lower().split(), ref.lower().split()
    return edit_distance(c, r) / len(r)


def pareto(points, key=lambda p: (p[0], p[1])):
    """O(n^2) dominance filter: maximize first coordinate, minimize second."""
    out = []
    for q in points:
        qi, qo = key(q)
        dominated = False
        for p in points:
            pi, po = key(p)
            if pi >= qi and po <= qo and (pi > qi or po < qo):
                dominated = True
                break
        if not dominated:
            out.append(q)
    return out


def select_flip(grad, ids, E, word_initial, protected, cons, flipped=(), ranking="score"):
    """Enumerate every (position, token) pair; return (i, v) or None."""
    n, V = len(ids), len(E)
    best = None
    for i in range(n):
        if cons.protect_first_last and i in (0, n - 1):
            continue
        if cons.protect_masked and protected[ids[i]]:
            continue
        if cons.one_flip_per_position and i in flipped:
            continue
        cur = sum(E[ids[i]][k] * grad[i][k] for k in range(len(grad[i])))
        for v in range(V):
            if v == ids[i]:
                continue
            if cons.protect_masked and protected[v]:
                continue
            if cons.respect_word_initial_partition and word_initial[v] != word_initial[ids[i]]:
                continue
            a, b = E[ids[i]], E[v]
            cos = sum(x * y for x, y in zip(a, b)) / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))
            dist = 1 - cos
            if cons.cosine_rule == "max_distance" and not dist <= cons.cosine_threshold:
                continue
            if cons.cosine_rule == "min_distance" and not dist >= cons.cosine_threshold:
                continue
            score = sum(E[v][k] * grad[i][k] for k in range(len(grad[i])))
            if not score - cur < 0:
                continue
            key = (score if ranking == "score" else score - cur, i, v)
            if best is None or key < best:
                best = key
    return None if best is None else (best[1], best[2])
