import csv
import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from advmt.harness import (CSV_COLUMNS, AttackContext, ParetoPoint, RecordStore, aggregate, build_report,
                           delta_table, dominates, expand_grid, grid_label, pareto_frontier, render_report,
                           run_sweep, sentence_seed, similarity_pair, strip_timing)
from advmt.metrics import METRIC_NAMES, chrf
from advmt.records import AttackRecord


def rec(x, x_att, y, y_att, hp=None, attack="synthetic"):
    return AttackRecord(attack, x, x_att, y, y_att, hyperparams=hp or {})


def test_grid_expansion_and_labels():
    pts = expand_grid({"budget": [0.1, 0.2], "mode": ["fraction_of_words"]})
    assert pts == [{"budget": 0.1, "mode": "fraction_of_words"}, {"budget": 0.2, "mode": "fraction_of_words"}]
    assert expand_grid([{}]) == [{}]
    with pytest.raises(ValueError):
        expand_grid([])
    assert grid_label({}) == "default"
    assert grid_label({"b": 1, "a": "x"}) == 'a="x",b=1'
    assert sentence_seed(0, 1) == sentence_seed(0, 1) != sentence_seed(0, 2)


def test_sweep_counts_and_verbatim_hyperparams(toy, corpus):
    res = run_sweep(corpus[:3], toy, "synthetic", [{"budget": 0.3}])
    assert len(res.records) == 3 and res.n_errors == 0
    res = run_sweep(corpus[:3], toy, "synthetic", {"budget": [0.0, 0.2], "mode": ["fraction_of_words"]})
    assert len(res.records) == 6
    assert {json.dumps(r.hyperparams, sort_keys=True) for r in res.records} == {
        json.dumps({"budget": b, "mode": "fraction_of_words"}, sort_keys=True) for b in (0.0, 0.2)}
    assert [r.record_id for r in res.records] == list(range(6))
    for r in res.records:
        assert r.y == toy.translate(toy.tokenize(r.x)).text
        assert r.y_att == toy.translate(toy.tokenize(r.x_att)).text


def test_resume_after_truncation_is_identical(tmp_path, toy, corpus):
    grid = {"budget": [0.1, 0.4]}
    full = tmp_path / "full.jsonl"
    run_sweep(corpus[:6], toy, "synthetic", grid, full, seed=3)
    lines = full.read_text(encoding="utf-8").splitlines(keepends=True)
    part = tmp_path / "part.jsonl"
    # keep 5 whole records and half of the sixth, as if the writer was killed mid-line
    part.write_text("".join(lines[:5]) + lines[5][:len(lines[5]) // 2], encoding="utf-8")
    res = run_sweep(corpus[:6], toy, "synthetic", grid, part, seed=3)
    assert res.n_new == len(lines) - 5
    a = [strip_timing(x) for x in full.read_text(encoding="utf-8").splitlines()]
    b = [strip_timing(x) for x in part.read_text(encoding="utf-8").splitlines()]
    assert a == b
    # a third run has nothing left to do
    assert run_sweep(corpus[:6], toy, "synthetic", grid, part, seed=3).n_new == 0


def test_parallel_workers_match_sequential(tmp_path, toy, corpus):
    from advmt.toy import make_toy
    grid = {"max_flips": [1, 2]}
    seq = run_sweep(corpus[:8], toy, "gradient", grid, tmp_path / "a.jsonl", seed=1)
    par = run_sweep(corpus[:8], lambda: make_toy(tokenizer=toy.tokenizer), "gradient", grid,
                    tmp_path / "b.jsonl", seed=1, workers=4)
    assert [strip_timing(r.to_dict()) for r in seq.records] == [strip_timing(r.to_dict()) for r in par.records]


def test_per_sentence_failure_is_recorded(toy, corpus):
    rows = corpus[:2] + [{"src": "   ", "ref": "x"}]
    res = run_sweep(rows, toy, "gradient", [{}])
    assert res.n_errors == 1
    assert res.records[2].error and "empty" in res.records[2].error.lower()


def test_unknown_attack(toy, corpus):
    with pytest.raises(KeyError):
        run_sweep(corpus[:1], toy, "nope", [{}])


def test_record_store_round_trip(tmp_path):
    store = RecordStore(tmp_path / "s.jsonl")
    r = rec("a b", "a c", "x y", "x z", {"budget": 0.5})
    r.record_id = 0
    store.append(r)
    assert [x.to_dict() for x in store.load()] == [r.to_dict()]


# -- aggregation

def test_aggregate_examples():
    one = rec("a b c d", "a b c d", "w x y z", "w x q z")
    [p] = aggregate([one], "chrf")
    sp = similarity_pair(one, "chrf")
    assert (p.sim_input, p.sim_output, p.count) == (sp.sim_input, sp.sim_output, 1)
    [p2] = aggregate([one, one], "chrf")
    assert (p2.sim_input, p2.sim_output) == (p.sim_input, p.sim_output) and p2.count == 2


def test_aggregate_hand_mean():
    rs = [rec("a b", "a b", "a b c", "a b c"), rec("a b", "a c", "a b c", "a b d"), rec("a b", "c d", "a", "b")]
    [p] = aggregate(rs, "wer")
    assert p.sim_input == pytest.approx((0 + 0.5 + 1.0) / 3, abs=1e-15)
    assert p.sim_output == pytest.approx((0 + 1 / 3 + 1.0) / 3, abs=1e-15)
    [m] = aggregate(rs, "wer", stat="median")
    assert (m.sim_input, m.sim_output) == (0.5, pytest.approx(1 / 3))


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([], "bleu")
    with pytest.raises(ValueError):
        aggregate([rec("a", "a", "b", "b"), rec("a", "a", "b", "b", attack="gradient")], "bleu")


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(8))))
def test_aggregate_permutation_invariant(perm):
    rng = random.Random(4)
    words = "a b c d e".split()
    rs = [rec(" ".join(rng.choices(words, k=4)), " ".join(rng.choices(words, k=4)),
              " ".join(rng.choices(words, k=5)), " ".join(rng.choices(words, k=5)), {"b": k % 2}) for k in range(8)]
    base = aggregate(rs, "chrf")
    assert aggregate([rs[k] for k in perm], "chrf") == base


# -- Pareto

def pts_from(coords, metric="chrf"):
    return [ParetoPoint(i, o, f"p{k}", metric=metric) for k, (i, o) in enumerate(coords)]


def test_pareto_examples():
    [p] = pareto_frontier(pts_from([(0.5, 0.5)]))
    assert (p.sim_input, p.sim_output) == (0.5, 0.5)
    front = pareto_frontier(pts_from([(0.9, 0.2), (0.85, 0.25)]))
    assert [(p.sim_input, p.sim_output) for p in front] == [(0.9, 0.2)]
    with pytest.raises(ValueError):
        pareto_frontier(pts_from([(float("nan"), 0.1)]))


def test_pareto_matches_oracle_on_random_sets():
    rng = np.random.default_rng(0)
    for k in range(100):
        if k % 2:
            coords = rng.integers(0, 6, size=(100, 2)) / 5  # many ties and duplicates
        else:
            coords = rng.random((100, 2))
        metric = "wer" if k % 5 == 0 else "chrf"
        pts = pts_from([tuple(map(float, c)) for c in coords], metric)
        sign = -1 if metric == "wer" else 1
        want = oracles.pareto(pts, key=lambda p: (sign * p.sim_input, sign * p.sim_output))
        got = pareto_frontier(pts)
        assert sorted(p.label for p in got) == sorted(p.label for p in want)
        assert pareto_frontier(got) == got
        ins = [sign * p.sim_input for p in got]
        assert ins == sorted(ins, reverse=True)
        assert not any(dominates(a, b) for a in got for b in got)
        assert all(any(p is q for q in pts) for p in got)


def test_wer_orientation():
    # lower input WER and higher output WER is the better attack
    a, b = pts_from([(0.1, 0.9), (0.2, 0.8)], "wer")
    assert dominates(a, b) and not dominates(b, a)


# -- deltas

def test_identity_deltas_are_zero(toy, corpus, provider):
    res = run_sweep(corpus[:5], toy, "identity", [{}])
    rows = delta_table({"identity": res.records}, METRIC_NAMES, provider)
    assert {r.metric_name for r in rows} == set(METRIC_NAMES)
    assert all(r.delta == 0.0 for r in rows)


def test_delta_hand_arithmetic():
    rs = [rec("a b c d", "a b c d", "a b c d", "a b x d", {"b": 1}),
          rec("a b c d", "a x c d", "a b c d", "x y z d", {"b": 2})]
    rows = {r.metric_name: r for r in delta_table({"syn": rs}, ["wer", "meteor"])}
    # b=1: wer in 0, out 0.25 -> -0.25; b=2: in 0.25, out 0.75 -> -0.5 (minimum wins)
    assert rows["wer"].delta == pytest.approx(-0.5) and rows["wer"].label == "b=2"
    # meteor b=1: 1 - 0.75 = 0.25; b=2: 0.75 - 0.25 = 0.5
    assert rows["meteor"].delta == pytest.approx(0.5) and rows["meteor"].label == "b=2"


# -- report

def test_delta_formatting_has_no_negative_zero():
    from advmt.harness import DeltaRow, render_delta_table
    rows = [DeltaRow("bleu", "a", -1e-9, "default", 1, 1, 1), DeltaRow("bleu", "b", 0.25, "default", 1, 1, 1)]
    assert render_delta_table(rows).splitlines()[2] == "| BLEU ↑ | 0.00 | **0.25** |"

def test_report_no_data(tmp_path):
    paths = render_report({}, [], tmp_path)
    text = (tmp_path / "report.md").read_text(encoding="utf-8")
    assert text.count("no data") == 3 and paths == [tmp_path / "report.md"]


def test_report_csv_rows_and_chart(tmp_path, toy, corpus):
    res = run_sweep(corpus[:4], toy, "synthetic", {"budget": [0.0, 0.2, 0.5]})
    paths = build_report({"synthetic": res.records}, tmp_path, ["chrf", "wer"], charts=True)
    assert tmp_path / "frontier_chrf.png" in paths and tmp_path / "frontier_wer.png" in paths
    with open(tmp_path / "frontier_chrf.csv", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CSV_COLUMNS and len(rows) - 1 == 3
    assert {r[4] for r in rows[1:]} <= {"true", "false"}


def test_chart_axis_labels(tmp_path, monkeypatch):
    import matplotlib.figure
    labels = []
    orig = matplotlib.figure.Figure.savefig

    def spy(self, *a, **kw):
        ax = self.axes[0]
        labels.append((ax.get_xlabel(), ax.get_ylabel()))
        return orig(self, *a, **kw)

    monkeypatch.setattr(matplotlib.figure.Figure, "savefig", spy)
    pts = pts_from([(0.9, 0.2), (0.8, 0.1)])
    render_report({"chrf": {"syn": (pts, pareto_frontier(pts))}}, [], tmp_path)
    assert labels == [("sim(X, X_att)", "sim(Y, Y_att)")]


def test_report_is_deterministic(tmp_path, toy, corpus):
    res = run_sweep(corpus[:4], toy, "synthetic", {"budget": [0.1, 0.3]})
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        build_report({"synthetic": res.records}, d, ["chrf", "bleu"])
    for name in ("report.md", "frontier_chrf.csv", "frontier_chrf.png", "frontier_bleu.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_attack_context_defaults(toy):
    ctx = AttackContext(toy)
    assert ctx.prefix_pool == [] and ctx.head is None
    assert chrf("a", "a") == 1.0
