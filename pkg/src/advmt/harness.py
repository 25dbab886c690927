"""Corpus-scale experiment runner: sweeps, similarity aggregation, Pareto frontiers,
best-setting delta tables and report rendering."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .gateway import CapabilityError, EmptyInputError, GatewayError, ModelAdapter
from .grad_attack import AttackConstraints, GradAttackConfig, char_grad_attack, gradient_attack
from .metrics import DISTANCE_METRICS, METRIC_NAMES, metric_value
from .perturb import PerturbBudget, char_swap_attack, prefix_attack, swls_attack, synthetic_attack, _as_record
from .records import AttackRecord
from .surrogate import LatentAttackConfig, bleuer_attack, mbart_attack

log = logging.getLogger(__name__)

METRIC_LABELS = {"bleu": "BLEU", "chrf": "chrF", "meteor": "METEOR", "wer": "WER",
                 "paraphrase": "Paraphrase similarity", "bertscore": "BertScore"}


# ---------------------------------------------------------------- corpus / store

def load_corpus(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "src" not in obj:
                raise ValueError(f"{path}:{n}: corpus line lacks 'src'")
            rows.append({"src": obj["src"], "ref": obj.get("ref")})
    return rows


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def dumps_record(rec: AttackRecord) -> str:
    return json.dumps(rec.to_dict(), sort_keys=True, ensure_ascii=False, default=_jsonable)


class RecordStore:
    """Append-only JSONL store of AttackRecords with a monotonically increasing record id."""

    def __init__(self, path):
        self.path = Path(path)

    def _repair(self):
        # a run killed mid-write may leave a partial final line
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        if data and not data.endswith(b"\n"):
            self.path.write_bytes(data[:data.rfind(b"\n") + 1])

    def load(self) -> list[AttackRecord]:
        self._repair()
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as fh:
            return [AttackRecord.from_dict(json.loads(line)) for line in fh if line.strip()]

    def append(self, rec: AttackRecord):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(dumps_record(rec) + "\n")
            fh.flush()
            os.fsync(fh.fileno())


def strip_timing(line_or_rec) -> dict:
    d = json.loads(line_or_rec) if isinstance(line_or_rec, str) else dict(line_or_rec)
    d.pop("timing", None)
    return d


# ---------------------------------------------------------------- attacks

@dataclass
class AttackContext:
    """Everything an attack may need besides the sentence and its hyperparameters."""

    model: ModelAdapter
    reverse_model: ModelAdapter | None = None
    head: Any = None
    provider: Any = None
    prefix_pool: list[str] = field(default_factory=list)


def _identity(src, ref, hp, ctx, seed):
    y = ctx.model.translate(ctx.model.tokenize(src)).text
    return AttackRecord("identity", src, src, y, y, ref=ref, model_id=ctx.model.model_id, stop_reason="budget")


def _budget(hp, seed, default_mode="fraction_of_words"):
    return PerturbBudget(hp.get("mode", default_mode), float(hp.get("budget", 0.0)), seed)


def _synthetic(src, ref, hp, ctx, seed):
    res = synthetic_attack(src, _budget(hp, seed), hp.get("op_mix"))
    return _as_record("synthetic", res, ctx.model, {}, ref=ref)


def _char_swap(src, ref, hp, ctx, seed):
    res = char_swap_attack(src, _budget(hp, seed, "fraction_of_chars"))
    return _as_record("char_swap", res, ctx.model, {}, ref=ref)


def _grad_config(hp) -> GradAttackConfig:
    cons = {k: hp[k] for k in ("cosine_threshold", "cosine_rule", "one_flip_per_position",
                               "respect_word_initial_partition", "protect_first_last", "protect_masked") if k in hp}
    return GradAttackConfig(max_flips=int(hp.get("max_flips", 1)), loss_mode=hp.get("loss_mode", "vs_model_translation"),
                            level=hp.get("level", "token"), constraints=AttackConstraints(**cons),
                            ranking=hp.get("ranking", "score"))


def _gradient(src, ref, hp, ctx, seed):
    return gradient_attack(src, ctx.model, _grad_config(hp), ref=ref)


def _char_gradient(src, ref, hp, ctx, seed):
    return char_grad_attack(src, ctx.model, _grad_config({**hp, "level": "character"}), ref=ref)


def _need_head(ctx):
    if ctx.head is None:
        raise CapabilityError("this attack needs a trained BleuHead (head_path)")
    return ctx.head


def _bleuer(src, ref, hp, ctx, seed):
    cfg = LatentAttackConfig(epsilon=float(hp.get("epsilon", 0.1)), steps=int(hp.get("steps", 1)),
                             target=float(hp.get("target", 1.0)))
    return bleuer_attack(src, ctx.model, _need_head(ctx), cfg, ref=ref)


def _mbart(src, ref, hp, ctx, seed):
    return mbart_attack(src, ctx.model, _need_head(ctx), _grad_config(hp), target=float(hp.get("target", 1.0)), ref=ref)


def _prefix(src, ref, hp, ctx, seed):
    pool = hp.get("pool") or ctx.prefix_pool
    return prefix_attack(src, ctx.model, pool, k=int(hp.get("k", 1)), metric=hp.get("metric", "chrf"),
                         provider=ctx.provider, ref=ref)


def _swls(src, ref, hp, ctx, seed):
    if ctx.reverse_model is None:
        raise CapabilityError("swls needs a reverse model")
    return swls_attack(src, ctx.model, ctx.reverse_model, budget=int(hp.get("budget", 1)),
                       candidates=int(hp.get("candidates", 16)), seed=seed, op_mix=hp.get("op_mix"), ref=ref)


ATTACKS: dict[str, Callable] = {
    "identity": _identity, "synthetic": _synthetic, "char_swap": _char_swap, "gradient": _gradient,
    "char_gradient": _char_gradient, "bleuer": _bleuer, "mbart": _mbart, "prefix": _prefix, "swls": _swls,
}


def expand_grid(grid) -> list[dict]:
    """A list of points is used verbatim; a dict of lists expands to its Cartesian product."""
    if isinstance(grid, dict):
        keys = sorted(grid)
        points = [dict(zip(keys, vals)) for vals in product(*(grid[k] for k in keys))]
    else:
        points = [dict(p) for p in grid]
    if not points:
        raise ValueError("hyperparameter grid is empty")
    return points


def grid_label(hp: dict) -> str:
    if not hp:
        return "default"
    return ",".join(f"{k}={json.dumps(hp[k], sort_keys=True)}" for k in sorted(hp))


def sentence_seed(seed: int, index: int) -> int:
    """Per-sentence seed shared by every grid point, so budgets form a fixed seed family."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def run_attack(name: str, src: str, ref, hp: dict, ctx: AttackContext, seed: int) -> AttackRecord:
    if name not in ATTACKS:
        raise KeyError(f"unknown attack {name!r}; known: {sorted(ATTACKS)}")
    return ATTACKS[name](src, ref, hp, ctx, seed)


@dataclass
class SweepResult:
    path: Path | None
    records: list[AttackRecord]
    n_new: int
    n_errors: int


def _fatal(exc: Exception) -> bool:
    # model unavailable: stop the whole run instead of logging per sentence
    return isinstance(exc, GatewayError) and not isinstance(exc, (CapabilityError, EmptyInputError))


def run_sweep(corpus, model: ModelAdapter | Callable[[], ModelAdapter], attack: str, grid, out_path=None,
              seed: int = 0, workers: int = 1, **ctx_kw) -> SweepResult:
    """One AttackRecord per (grid point, sentence), appended to ``out_path`` as it completes.

    ``model`` may be a factory; with ``workers > 1`` each worker thread builds its own
    adapter from it. Records already present in the store (same attack, grid label and
    sentence index) are skipped, so an interrupted run resumes where it stopped.
    """
    if attack not in ATTACKS:
        raise KeyError(f"unknown attack {attack!r}; known: {sorted(ATTACKS)}")
    points = expand_grid(grid)
    corpus = list(corpus)
    store = RecordStore(out_path) if out_path else None
    existing = store.load() if store else []
    done = {(r.key["attack"], r.key["grid"], r.key["index"]) for r in existing if r.key}
    next_id = max((r.record_id for r in existing if r.record_id is not None), default=-1) + 1

    factory = model if callable(model) and not isinstance(model, ModelAdapter) else (lambda: model)
    todo = [(p, i) for p in points for i in range(len(corpus)) if (attack, grid_label(p), i) not in done]

    local = threading.local()

    def ctx_for_thread() -> AttackContext:
        if not hasattr(local, "ctx"):
            local.ctx = AttackContext(model=factory() if workers > 1 else shared_model, **ctx_kw)
        return local.ctx

    shared_model = factory()

    def work(item):
        hp, i = item
        row = corpus[i]
        s = sentence_seed(seed, i)
        t0 = time.perf_counter()
        try:
            rec = run_attack(attack, row["src"], row.get("ref"), hp, ctx_for_thread(), s)
        except Exception as exc:  # noqa: BLE001 - per-sentence failures are recorded, not fatal
            if _fatal(exc):
                raise
            log.warning("%s %s sentence %d failed: %s", attack, grid_label(hp), i, exc)
            rec = AttackRecord(attack, row["src"], row["src"], "", "", ref=row.get("ref"),
                               error=f"{type(exc).__name__}: {exc}")
        rec.attack_name = attack
        rec.hyperparams = dict(hp)
        rec.seed = s
        rec.key = {"attack": attack, "grid": grid_label(hp), "index": i}
        rec.timing = {"seconds": time.perf_counter() - t0}
        return rec

    new, n_err = [], 0
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(work, todo)  # yields in submission order: single ordered writer
            for rec in results:
                rec.record_id = next_id
                next_id += 1
                n_err += rec.error is not None
                if store:
                    store.append(rec)
                new.append(rec)
    else:
        for item in todo:
            rec = work(item)
            rec.record_id = next_id
            next_id += 1
            n_err += rec.error is not None
            if store:
                store.append(rec)
            new.append(rec)
    return SweepResult(Path(out_path) if out_path else None, existing + new, len(new), n_err)


# ---------------------------------------------------------------- aggregation

@dataclass(frozen=True)
class SimilarityPair:
    metric_name: str
    sim_input: float
    sim_output: float


@dataclass(frozen=True)
class ParetoPoint:
    sim_input: float
    sim_output: float
    label: str
    count: int = 1
    attack: str = ""
    metric: str = ""


def similarity_pair(rec: AttackRecord, metric: str, provider=None) -> SimilarityPair:
    return SimilarityPair(metric, metric_value(metric, rec.x, rec.x_att, provider),
                          metric_value(metric, rec.y, rec.y_att, provider))


def _center(values, stat: str) -> float:
    if stat == "mean":
        return math.fsum(values) / len(values)  # exactly rounded, so order-independent
    if stat == "median":
        return float(statistics.median(values))
    raise ValueError(f"unknown statistic {stat!r}")


def aggregate(records, metric: str, provider=None, stat: str = "mean") -> list[ParetoPoint]:
    """One point per grid label: mean (or median) sim_input and sim_output over sentences."""
    records = [r for r in records if r.error is None]
    if not records:
        raise ValueError("empty record set")
    names = {r.attack_name for r in records}
    if len(names) > 1:
        raise ValueError(f"records mix attacks {sorted(names)}")
    groups: dict[str, list[SimilarityPair]] = {}
    for r in records:
        groups.setdefault(grid_label(r.hyperparams), []).append(similarity_pair(r, metric, provider))
    attack = names.pop()
    out = []
    for label in sorted(groups):
        pairs = groups[label]
        out.append(ParetoPoint(_center([p.sim_input for p in pairs], stat), _center([p.sim_output for p in pairs], stat),
                               label, len(pairs), attack, metric))
    return out


def _oriented(p: ParetoPoint) -> tuple[float, float]:
    # distances are negated so "higher input similarity, lower output similarity" is always better
    if p.metric in DISTANCE_METRICS:
        return -p.sim_input, -p.sim_output
    return p.sim_input, p.sim_output


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    ai, ao = _oriented(a)
    bi, bo = _oriented(b)
    return ai >= bi and ao <= bo and (ai > bi or ao < bo)


def pareto_frontier(points) -> list[ParetoPoint]:
    """Non-dominated subset, sorted by (oriented) sim_input descending."""
    pts = list(points)
    for p in pts:
        if not (math.isfinite(p.sim_input) and math.isfinite(p.sim_output)):
            raise ValueError("non-finite coordinates")
    # sweep: after sorting by input desc / output asc, a point survives iff its output is
    # strictly below every earlier survivor's output (or it duplicates the running best)
    order = sorted(range(len(pts)), key=lambda k: (-_oriented(pts[k])[0], _oriented(pts[k])[1], pts[k].label, k))
    front, best_out, best_in = [], math.inf, None
    for k in order:
        i, o = _oriented(pts[k])
        if o < best_out:
            front.append(pts[k])
            best_out, best_in = o, i
        elif o == best_out and i == best_in:
            front.append(pts[k])
    return front


@dataclass
class DeltaRow:
    metric_name: str
    attack_name: str
    delta: float
    label: str
    sim_input: float
    sim_output: float
    count: int


def best_point(points: list[ParetoPoint], metric: str) -> tuple[ParetoPoint, float]:
    deltas = [p.sim_input - p.sim_output for p in points]
    pick = min if metric in DISTANCE_METRICS else max
    k = deltas.index(pick(deltas))
    return points[k], deltas[k]


def delta_table(stores: dict[str, list[AttackRecord]], metrics=METRIC_NAMES, provider=None,
                stat: str = "mean") -> list[DeltaRow]:
    """Best-setting delta (mean sim_input - mean sim_output) per (attack, metric).

    Similarities take the grid point with the largest delta; WER, a distance, the smallest.
    """
    rows = []
    for metric in metrics:
        for attack, records in stores.items():
            p, d = best_point(aggregate(records, metric, provider, stat), metric)
            rows.append(DeltaRow(metric, attack, d, p.label, p.sim_input, p.sim_output, p.count))
    return rows


# ---------------------------------------------------------------- report

CSV_COLUMNS = ["metric", "hyperparam_label", "sim_input", "sim_output", "on_frontier", "attack"]


def _fmt(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def render_delta_table(deltas: list[DeltaRow]) -> str:
    attacks = list(dict.fromkeys(r.attack_name for r in deltas))
    metrics = list(dict.fromkeys(r.metric_name for r in deltas))
    cell = {(r.metric_name, r.attack_name): r.delta for r in deltas}
    lines = ["| Metric type | " + " | ".join(attacks) + " |", "|---" * (len(attacks) + 1) + "|"]
    for m in metrics:
        arrow = "↓" if m in DISTANCE_METRICS else "↑"
        vals = [cell.get((m, a)) for a in attacks]
        present = [v for v in vals if v is not None]
        best = (min if m in DISTANCE_METRICS else max)(present) if present else None
        cells = []
        for v in vals:
            if v is None:
                cells.append("n/a")
            else:
                s = _fmt(v)
                cells.append(f"**{s}**" if len(attacks) > 1 and v == best else s)
        lines.append(f"| {METRIC_LABELS.get(m, m)} {arrow} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


SAMPLE_ROWS = (("Orig. sentence", "x"), ("Attacked sentence", "x_att"), ("Orig. translation", "ref"),
               ("Translation", "y"), ("Attacked translation", "y_att"))


def render_samples(records: list[AttackRecord]) -> str:
    lines = ["| Attack type | Sentence type | Sentence |", "|---|---|---|"]
    for rec in records:
        for k, (title, attr) in enumerate(SAMPLE_ROWS):
            text = getattr(rec, attr)
            text = "—" if text is None else str(text).replace("|", "\\|")
            lines.append(f"| {rec.attack_name if k == 0 else ''} | {title} | {text} |")
    return "\n".join(lines)


def _chart(path: Path, metric: str, per_attack: dict[str, tuple[list[ParetoPoint], list[ParetoPoint]]]):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sign = -1.0 if metric in DISTANCE_METRICS else 1.0
    fig, ax = plt.subplots(figsize=(5, 4))
    for attack, (points, front) in per_attack.items():
        line = ax.scatter([sign * p.sim_input for p in points], [sign * p.sim_output for p in points], s=14,
                          alpha=0.6, label=attack)
        ax.plot([sign * p.sim_input for p in front], [sign * p.sim_output for p in front], "-",
                color=line.get_facecolor()[0])
    ax.set_xlabel("sim(X, X_att)" if sign > 0 else "sim(X, X_att)  [-WER]")
    ax.set_ylabel("sim(Y, Y_att)" if sign > 0 else "sim(Y, Y_att)  [-WER]")
    ax.set_title(METRIC_LABELS.get(metric, metric))
    if per_attack:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def render_report(frontiers: dict[str, dict[str, tuple[list[ParetoPoint], list[ParetoPoint]]]],
                  deltas: list[DeltaRow], out_dir, samples: list[AttackRecord] = (),
                  charts: bool = True, provenance: list[str] = ()) -> list[Path]:
    """Write per-metric frontier CSV (+ PNG chart) and a markdown report.

    ``frontiers`` maps metric -> attack -> (all points, frontier points).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    written = []
    for metric, per_attack in frontiers.items():
        path = out / f"frontier_{metric}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for attack, (points, front) in per_attack.items():
                on = {id(p) for p in front}
                for p in points:
                    w.writerow([metric, p.label, repr(p.sim_input), repr(p.sim_output),
                                str(id(p) in on).lower(), attack])
        written.append(path)
        if charts:
            png = out / f"frontier_{metric}.png"
            _chart(png, metric, per_attack)
            written.append(png)

    md = ["# Attack report", ""]
    md += ["Dominance: higher sim(X, X_att) and lower sim(Y, Y_att) is better (the lower right corner).",
           "WER is a distance, so it is negated before the frontier is computed; its delta is better when lower.", ""]
    md += ["## Best-setting deltas", "",
           "Delta = mean sim(X, X_att) - mean sim(Y, Y_att) at each attack's best grid point.", ""]
    md.append(render_delta_table(deltas) if deltas else "no data")
    md += ["", "## Frontiers", ""]
    any_points = False
    for metric, per_attack in frontiers.items():
        for attack, (points, front) in per_attack.items():
            any_points |= bool(points)
            md.append(f"- {METRIC_LABELS.get(metric, metric)} / {attack}: {len(points)} points, "
                      f"{len(front)} on frontier")
    if not any_points:
        md.append("no data")
    md += ["", "## Samples", ""]
    md.append(render_samples(list(samples)) if samples else "no data")
    if provenance:
        md += ["", "## Provenance", ""] + [f"- {line}" for line in provenance]
    path = out / "report.md"
    path.write_text("\n".join(md) + "\n", encoding="utf-8")
    written.append(path)
    return written


def build_report(stores: dict[str, list[AttackRecord]], out_dir, metrics=METRIC_NAMES, provider=None,
                 stat: str = "mean", n_samples: int = 3, charts: bool = True, provenance: list[str] = ()) -> list[Path]:
    """Aggregate record stores per attack and render everything :func:`render_report` emits."""
    stores = {a: [r for r in recs if r.error is None] for a, recs in stores.items()}
    stores = {a: recs for a, recs in stores.items() if recs}
    frontiers = {}
    for metric in metrics:
        frontiers[metric] = {}
        for attack, recs in stores.items():
            pts = aggregate(recs, metric, provider, stat)
            frontiers[metric][attack] = (pts, pareto_frontier(pts))
    deltas = delta_table(stores, metrics, provider, stat) if stores else []
    samples = []
    for attack, recs in stores.items():
        changed = [r for r in recs if r.x_att != r.x] or recs
        samples += changed[:n_samples]
    return render_report(frontiers, deltas, out_dir, samples, charts, provenance)
