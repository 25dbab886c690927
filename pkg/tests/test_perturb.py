import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmt.metrics import chrf, metric_value
from advmt.perturb import (DEFAULT_MIX, OP_KINDS, PerturbBudget, PerturbOp, char_swap_attack, keyboard_neighbors,
                           keyboard_typo, prefix_attack, replay, roundtrip_divergence, swls_attack, synthetic_attack)
from advmt.toy import toy_corpus

SAMPLE = "Cars get many more miles to the gallon."
SENTENCE = st.lists(st.text(alphabet="abcdefgXYZ.,!", min_size=1, max_size=8), min_size=1, max_size=8).map(" ".join)


def test_zero_budget_is_identity():
    for mode in ("fraction_of_words", "fraction_of_chars", "max_operations"):
        res = synthetic_attack(SAMPLE, PerturbBudget(mode, 0, seed=3))
        assert res.x_att == SAMPLE and res.ops == []


def test_forced_adjacent_swap():
    assert replay("cat", [PerturbOp("swap_adjacent_chars", 0, 0)]) == "act"


def test_full_shuffle_matches_sample_pattern():
    # every word becomes a permutation of its letters, trailing punctuation stays put
    res = synthetic_attack(SAMPLE, PerturbBudget("fraction_of_words", 1.0, seed=0), {"full_char_shuffle": 1.0})
    sample_att = "arCs egt myna emro ielsm to het gllnoa."
    for orig, att, paper in zip(SAMPLE.split(), res.x_att.split(), sample_att.split()):
        assert sorted(att) == sorted(orig) == sorted(paper)
        assert att.endswith(".") == orig.endswith(".")
    assert len(res.ops) == len(SAMPLE.split())


def test_keyboard_typo_uses_adjacent_keys():
    assert set(keyboard_neighbors("a")) == {"q", "w", "s", "z", "x"}
    rng = random.Random(0)
    for _ in range(20):
        out = keyboard_typo("cat", 1, rng=rng)
        assert out[0] + out[2] == "ct" and out[1] in {"q", "w", "s", "z", "x"}
    assert keyboard_typo("Cat", 0, rng=rng)[0] in set(keyboard_neighbors("C"))
    with pytest.raises(IndexError):
        keyboard_typo("cat", 3)


def test_keyboard_typo_skips_unknown_characters(caplog):
    with caplog.at_level("INFO", logger="advmt.perturb"):
        assert keyboard_typo("a1b", 1) == "a1b"
    assert "no neighbors" in caplog.text


def test_invalid_inputs():
    with pytest.raises(ValueError):
        synthetic_attack("  ", PerturbBudget("max_operations", 1))
    with pytest.raises(ValueError):
        synthetic_attack(SAMPLE, PerturbBudget("max_operations", 1), {"omit_char": 0.0})
    with pytest.raises(ValueError):
        synthetic_attack(SAMPLE, PerturbBudget("max_operations", 1), {"omit_char": -1.0, "swap_words": 1.0})
    with pytest.raises(ValueError):
        PerturbBudget("fraction_of_words", 1.5)
    assert "full_char_shuffle" not in DEFAULT_MIX


@settings(max_examples=200, deadline=None)
@given(SENTENCE, st.sampled_from(OP_KINDS), st.integers(0, 2 ** 20), st.integers(1, 5))
def test_replay_and_per_kind_invariants(text, kind, seed, n):
    res = synthetic_attack(text, PerturbBudget("max_operations", n, seed), {kind: 1.0})
    assert replay(text, res.op_log) == res.x_att
    assert replay(text, res.ops) == res.x_att
    applied = [op for op in res.ops if not op.skipped]
    if kind in ("swap_adjacent_chars", "shuffle_word_chars", "full_char_shuffle", "swap_words"):
        assert Counter(res.x_att) == Counter(text)
    if kind in ("swap_adjacent_chars", "shuffle_word_chars", "full_char_shuffle"):
        assert sorted(map(sorted, res.x_att.split())) == sorted(map(sorted, text.split()))
    if kind == "omit_char":
        assert len(res.x_att) == len(text) - len(applied)
    if kind == "insert_char":
        assert len(res.x_att) == len(text) + len(applied)


def test_single_op_length_change():
    for seed in range(30):
        res = synthetic_attack(SAMPLE, PerturbBudget("max_operations", 1, seed), {"omit_char": 1, "insert_char": 1})
        assert abs(len(res.x_att) - len(SAMPLE)) == 1


def test_synthetic_is_deterministic():
    b = PerturbBudget("fraction_of_chars", 0.2, seed=11)
    assert synthetic_attack(SAMPLE, b).op_log == synthetic_attack(SAMPLE, b).op_log


def test_char_swap_attack_properties():
    assert char_swap_attack(SAMPLE, PerturbBudget("max_operations", 0)).x_att == SAMPLE
    for seed in range(20):
        res = char_swap_attack(SAMPLE, PerturbBudget("max_operations", 1, seed))
        diff = [i for i, (a, b) in enumerate(zip(SAMPLE, res.x_att)) if a != b]
        assert diff == [] or (len(diff) == 2 and diff[1] == diff[0] + 1)
        assert sorted(map(sorted, res.x_att.split())) == sorted(map(sorted, SAMPLE.split()))


def test_budget_monotonicity(toy):
    corpus = toy_corpus(toy, 200, seed=9)
    means = []
    for frac in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5):
        vals = [chrf(synthetic_attack(r["src"], PerturbBudget("fraction_of_words", frac, seed=i)).x_att, r["src"])
                for i, r in enumerate(corpus)]
        means.append(sum(vals) / len(vals))
    assert means[0] == 1.0
    assert all(a >= b for a, b in zip(means, means[1:])), means


# -- model-based baselines

def test_prefix_attack_matches_brute_force(toy, corpus):
    pool = ["house", "city", "people", "time", "car", "the"]
    for row in corpus[:8]:
        rec = prefix_attack(row["src"], toy, pool, k=1)
        y = toy.translate(toy.tokenize(row["src"])).text
        sims = [(metric_value("chrf", y, toy.translate(toy.tokenize(f"{p} {row['src']}")).text), k)
                for k, p in enumerate(pool)]
        best = min(sims)
        if best[0] < 1.0:
            assert rec.meta["prefix"] == [pool[best[1]]]
            assert rec.x_att.startswith(pool[best[1]] + " ")
        else:
            assert rec.x_att == row["src"]


def test_prefix_attack_edge_cases(toy):
    assert prefix_attack(SAMPLE, toy, ["house"], k=0).x_att == SAMPLE
    with pytest.raises(ValueError):
        prefix_attack(SAMPLE, toy, [], k=1)
    rec = prefix_attack(SAMPLE, toy, ["house", "city"], k=2)
    assert rec.x_att.split()[:len(rec.meta["prefix"])] == rec.meta["prefix"]


def test_swls_exact_round_trip_returns_input(toy_pair, corpus):
    fwd, rev = toy_pair
    for row in corpus[:5]:
        assert roundtrip_divergence(row["src"], fwd, rev) == 0.0
        rec = swls_attack(row["src"], fwd, rev, budget=3, candidates=8, seed=1)
        assert rec.x_att == row["src"]
        assert rec.stop_reason == "no_improving_candidate"
        assert swls_attack(row["src"], fwd, rev, budget=0).x_att == row["src"]


def test_swls_score_never_below_input(toy_pair, corpus):
    from advmt.toy import make_toy
    fwd, rev = toy_pair
    lossy = make_toy(shift=-2, tokenizer=fwd.tokenizer)  # not the inverse, so round trips diverge
    lossy.direction = rev.direction
    for row in corpus[:5]:
        base = roundtrip_divergence(row["src"], fwd, lossy)
        rec = swls_attack(row["src"], fwd, lossy, budget=2, candidates=6, seed=2)
        assert rec.meta["roundtrip_divergence"] >= base
