"""Command-line driver: ``advmt attack | train-head | evaluate | frontier | report | serve-toy | toy-init``.

Exit codes: 0 success, 2 when some sentences failed, 1 on fatal errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .config import ConfigError, RunConfig, manifest, parse_config, unflatten
from .gateway import GatewayError
from .harness import (RecordStore, aggregate, build_report, load_corpus, pareto_frontier,
                      run_sweep)
from .metrics import METRIC_NAMES
from .providers import get_provider

log = logging.getLogger("advmt")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


def _load_adapter(url, toy_path, timeout=30.0):
    if url:
        from .client import RemoteAdapter

        return RemoteAdapter(url, timeout=timeout)
    from .toy import ToyAdapter

    return ToyAdapter.load(toy_path)


def _config_from_args(args, command: str) -> RunConfig:
    data: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    flags = {
        "model.url": getattr(args, "model_url", None), "model.toy_path": getattr(args, "toy", None),
        "model.reverse_url": getattr(args, "reverse_url", None),
        "model.reverse_toy_path": getattr(args, "reverse_toy", None),
        "corpus": getattr(args, "corpus", None), "attack.name": getattr(args, "attack", None),
        "attack.grid": json.loads(args.grid) if getattr(args, "grid", None) else None,
        "output_dir": getattr(args, "out", None), "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None), "head_path": getattr(args, "head", None),
        "provider": getattr(args, "provider", None), "limit": getattr(args, "limit", None),
        "metrics": args.metrics.split(",") if getattr(args, "metrics", None) else None,
        "train.epochs": getattr(args, "epochs", None),
    }

    merged = unflatten(data)
    for key, value in flags.items():
        if value is None:
            continue
        node = merged
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    # a model flag replaces whatever source the config file named
    if getattr(args, "model_url", None):
        merged["model"]["toy_path"] = None
    elif getattr(args, "toy", None):
        merged["model"]["url"] = None
    cfg = parse_config(merged)
    cfg.check_paths(need_corpus=True)
    return cfg


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_attack(args) -> int:
    cfg = _config_from_args(args, "attack")
    if cfg.seed is None:
        raise ConfigError("seed: required for attack runs (--seed or the config file)")
    out = Path(cfg.output_dir)
    corpus = load_corpus(cfg.corpus)
    if cfg.limit is not None:
        corpus = corpus[:cfg.limit]
    head = None
    if cfg.attack.name in ("bleuer", "mbart") and not cfg.head_path:
        raise ConfigError(f"head_path: required for attack {cfg.attack.name!r}")
    if cfg.attack.name == "swls" and not (cfg.model.reverse_url or cfg.model.reverse_toy_path):
        raise ConfigError("model.reverse_url: swls needs a reverse model (or model.reverse_toy_path)")
    if cfg.head_path:
        from .surrogate import BleuHead

        head = BleuHead.load(cfg.head_path)
    reverse = None
    if cfg.model.reverse_url or cfg.model.reverse_toy_path:
        reverse = _load_adapter(cfg.model.reverse_url, cfg.model.reverse_toy_path, cfg.model.timeout)

    def factory():
        return _load_adapter(cfg.model.url, cfg.model.toy_path, cfg.model.timeout)

    store = out / f"records_{cfg.attack.name}.jsonl"
    _write_json(out / f"manifest_{cfg.attack.name}.json", manifest(cfg, "attack", store=store.name))
    res = run_sweep(corpus, factory, cfg.attack.name, cfg.attack.grid, out_path=store, seed=cfg.seed,
                    workers=cfg.workers, reverse_model=reverse, head=head, provider=get_provider(cfg.provider),
                    prefix_pool=cfg.prefix_pool)
    print(f"{res.n_new} new records ({len(res.records)} total, {res.n_errors} failed) -> {store}")
    return EXIT_PARTIAL if res.n_errors else EXIT_OK


def cmd_train_head(args) -> int:
    from .surrogate import HeadTrainConfig, build_head_dataset, train_head

    cfg = _config_from_args(args, "train-head")
    out = Path(cfg.output_dir)
    corpus = [r for r in load_corpus(cfg.corpus) if r.get("ref")]
    if cfg.limit is not None:
        corpus = corpus[:cfg.limit]
    model = _load_adapter(cfg.model.url, cfg.model.toy_path, cfg.model.timeout)
    provider = get_provider(cfg.provider) if cfg.train.metric == "bertscore" else None
    data = build_head_dataset(corpus, model, cfg.train.metric, provider)
    tc = HeadTrainConfig(learning_rate=cfg.train.learning_rate, epochs=cfg.train.epochs,
                         batch_size=cfg.train.batch_size, validation_fraction=cfg.train.validation_fraction,
                         seed=cfg.seed or 0, hidden=tuple(cfg.train.hidden))
    head, report = train_head(data, tc)
    out.mkdir(parents=True, exist_ok=True)
    head.save(out / "head.json")
    _write_json(out / "head_report.json", {**manifest(cfg, "train-head"), "report": report.as_dict()})
    print(f"config {cfg.config_hash()[:12]}: val MSE {report.final_val_mse} -> {out / 'head.json'}")
    return EXIT_OK


def _stores(paths) -> dict[str, list]:
    stores: dict[str, list] = {}
    for p in paths:
        for rec in RecordStore(p).load():
            stores.setdefault(rec.attack_name, []).append(rec)
    if not stores:
        raise ConfigError("no records found in " + ", ".join(map(str, paths)))
    return stores


def cmd_evaluate(args) -> int:
    provider = get_provider(args.provider)
    metrics = args.metrics.split(",") if args.metrics else list(METRIC_NAMES)
    result = []
    for attack, recs in _stores(args.records).items():
        for metric in metrics:
            for p in aggregate(recs, metric, provider, args.stat):
                result.append({"attack": attack, "metric": metric, "hyperparam_label": p.label,
                               "sim_input": p.sim_input, "sim_output": p.sim_output, "count": p.count})
    w = csv.DictWriter(sys.stdout, ["attack", "metric", "hyperparam_label", "sim_input", "sim_output", "count"],
                       lineterminator="\n")
    w.writeheader()
    w.writerows(result)
    if args.out:
        _write_json(Path(args.out), result)
    return EXIT_OK


def cmd_frontier(args) -> int:
    provider = get_provider(args.provider)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["attack", "metric", "hyperparam_label", "sim_input", "sim_output"])
    for attack, recs in _stores(args.records).items():
        for p in pareto_frontier(aggregate(recs, args.metric, provider, args.stat)):
            w.writerow([attack, args.metric, p.label, repr(p.sim_input), repr(p.sim_output)])
    return EXIT_OK


def _provenance(paths) -> list[str]:
    # manifests written by `attack` sit next to their record stores
    lines = []
    for p in paths:
        p = Path(p)
        m = p.with_name(p.name.replace("records_", "manifest_", 1)).with_suffix(".json")
        if m.name != p.name and m.exists():
            info = json.loads(m.read_text(encoding="utf-8"))
            lines.append(f"{p.name}: config {info.get('config_hash')}, seed {info.get('seed')}, "
                         f"advmt {info.get('version')}")
        else:
            lines.append(f"{p.name}: no manifest found")
    return lines


def cmd_report(args) -> int:
    metrics = args.metrics.split(",") if args.metrics else list(METRIC_NAMES)
    files = build_report(_stores(args.records), args.out, metrics, get_provider(args.provider), args.stat,
                         n_samples=args.samples, charts=not args.no_charts, provenance=_provenance(args.records))
    for f in files:
        print(f)
    return EXIT_OK


def cmd_serve_toy(args) -> int:
    from .service import serve
    from .toy import ToyAdapter, make_toy_pair

    if args.toy:
        adapter = ToyAdapter.load(args.toy)
    else:
        fwd, rev = make_toy_pair(shift=args.shift, seed=args.model_seed)
        adapter = rev if args.reverse else fwd
    print(f"serving {adapter.model_id} ({'->'.join(adapter.direction)}) on http://{args.host}:{args.port}",
          flush=True)
    serve(adapter, args.host, args.port)
    return EXIT_OK


def cmd_toy_init(args) -> int:
    from .toy import make_toy_pair, toy_corpus

    fwd, rev = make_toy_pair(shift=args.shift, seed=args.model_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fwd.save(out / "toy.json")
    rev.save(out / "toy_reverse.json")
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for row in toy_corpus(fwd, args.n, seed=args.corpus_seed):
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    print(f"wrote {out / 'toy.json'}, {out / 'toy_reverse.json'}, {out / 'corpus.jsonl'}")
    return EXIT_OK


def _run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run config; flags override its values")
    p.add_argument("--model-url", help="advmt/1 server URL")
    p.add_argument("--toy", help="toy model JSON file")
    p.add_argument("--reverse-url")
    p.add_argument("--reverse-toy")
    p.add_argument("--corpus", help="JSONL corpus of {src, ref}")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="required for attack, here or in the config")
    p.add_argument("--head", help="trained head JSON (bleuer, mbart)")
    p.add_argument("--provider")
    p.add_argument("--metrics", help="comma-separated subset of " + ",".join(METRIC_NAMES))
    p.add_argument("--limit", type=int, help="only the first N corpus lines")


def _store_flags(p: argparse.ArgumentParser):
    p.add_argument("records", nargs="+", help="record store JSONL files")
    p.add_argument("--provider", default="hashing")
    p.add_argument("--stat", choices=["mean", "median"], default="mean")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="advmt", description="Adversarial attacks on translation models")
    ap.add_argument("--version", action="version", version=f"advmt {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="run an attack sweep over a corpus")
    _run_flags(p)
    p.add_argument("--attack", help="attack name")
    p.add_argument("--grid", help='JSON grid, e.g. \'{"budget": [0, 0.2]}\'')
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train-head", help="train the BLEU-approximating head")
    _run_flags(p)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("evaluate", help="per-setting mean similarities")
    _store_flags(p)
    p.add_argument("--metrics")
    p.add_argument("--out", help="also write JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("frontier", help="Pareto frontier for one metric")
    _store_flags(p)
    p.add_argument("--metric", default="chrf", choices=METRIC_NAMES)
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("report", help="frontier CSVs, charts, delta table and samples")
    _store_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--no-charts", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve-toy", help="serve the toy cipher model over the wire protocol")
    p.add_argument("--toy", help="toy model JSON (default: build one)")
    p.add_argument("--shift", type=int, default=1)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--reverse", action="store_true", help="serve the inverse cipher")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve_toy)

    p = sub.add_parser("toy-init", help="write a toy model pair and a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--shift", type=int, default=1)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--corpus-seed", type=int, default=0)
    p.set_defaults(func=cmd_toy_init)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (GatewayError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
