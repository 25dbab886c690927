"""Run configuration: a single YAML file (nested sections or flat dotted keys).

Example::

    model:
      toy_path: toy.json          # or url: http://127.0.0.1:8000
    attack:
      name: synthetic
      grid: {budget: [0.0, 0.2]}
    corpus: corpus.jsonl
    output_dir: runs/synthetic
    seed: 0

``ADVMT_MODEL_URL`` overrides ``model.url`` (and clears ``model.toy_path``).
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .metrics import METRIC_NAMES

ENV_MODEL_URL = "ADVMT_MODEL_URL"


class ConfigError(ValueError):
    """Validation failure; ``str()`` lists every problem with its field path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    url: str | None = None
    toy_path: str | None = None
    reverse_url: str | None = None
    reverse_toy_path: str | None = None
    timeout: float = 30.0

    @model_validator(mode="after")
    def _one_source(self):
        if (self.url is None) == (self.toy_path is None):
            raise ValueError("set exactly one of model.url or model.toy_path")
        return self


class AttackSection(_Strict):
    name: str = "synthetic"
    grid: list[dict[str, Any]] | dict[str, list[Any]] = Field(default_factory=lambda: [{}])

    @field_validator("grid")
    @classmethod
    def _nonempty(cls, v):
        if isinstance(v, dict):
            if not v or any(len(vals) == 0 for vals in v.values()):
                raise ValueError("grid must be non-empty")
        elif not v:
            raise ValueError("grid must be non-empty")
        return v

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        from .harness import ATTACKS

        if v not in ATTACKS:
            raise ValueError(f"unknown attack {v!r}; known: {sorted(ATTACKS)}")
        return v


class TrainSection(_Strict):
    metric: Literal["bleu", "bertscore"] = "bleu"
    epochs: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 0
    validation_fraction: float = 0.2
    hidden: list[int] = Field(default_factory=lambda: [256])


class RunConfig(_Strict):
    model: ModelSection
    corpus: str
    attack: AttackSection = Field(default_factory=AttackSection)
    metrics: list[str] = Field(default_factory=lambda: list(METRIC_NAMES))
    provider: str = "hashing"
    output_dir: str = "runs"
    seed: int | None = None
    head_path: str | None = None
    prefix_pool: list[str] = Field(default_factory=list)
    workers: int = 1
    stat: Literal["mean", "median"] = "mean"
    limit: int | None = None
    train: TrainSection = Field(default_factory=TrainSection)

    @field_validator("metrics")
    @classmethod
    def _metrics(cls, v):
        bad = [m for m in v if m not in METRIC_NAMES]
        if bad:
            raise ValueError(f"unknown metrics {bad}; known: {list(METRIC_NAMES)}")
        return v

    @field_validator("workers")
    @classmethod
    def _workers(cls, v):
        if v < 1:
            raise ValueError("workers must be >= 1")
        return v

    def check_paths(self, base: Path | None = None, need_corpus: bool = True):
        """Referenced files must exist; raises ConfigError naming the field."""
        problems = []
        checks = [("model.toy_path", self.model.toy_path), ("model.reverse_toy_path", self.model.reverse_toy_path),
                  ("head_path", self.head_path)]
        if need_corpus:
            checks.insert(0, ("corpus", self.corpus))
        for name, p in checks:
            if p is not None and not _resolve(p, base).exists():
                problems.append(f"{name}: path does not exist: {p}")
        if problems:
            raise ConfigError("invalid config:\n  " + "\n  ".join(problems))

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, allow_unicode=True)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _resolve(p: str, base: Path | None) -> Path:
    path = Path(p)
    return path if path.is_absolute() or base is None else base / path


def unflatten(data: dict) -> dict:
    """``{"model.url": x}`` -> ``{"model": {"url": x}}``; nested input passes through."""
    out: dict = {}
    for key, value in data.items():
        parts = str(key).split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: conflicts with a scalar at {part}")
        if isinstance(value, dict) and parts[-1] in node and isinstance(node[parts[-1]], dict):
            node[parts[-1]].update(value)
        else:
            node[parts[-1]] = value
    return out


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def parse_config(data: dict | None, env: dict | None = None) -> RunConfig:
    data = unflatten(dict(data or {}))
    env = os.environ if env is None else env
    url = env.get(ENV_MODEL_URL)
    if url:
        data.setdefault("model", {})
        data["model"]["url"] = url
        data["model"]["toy_path"] = None
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path, env: dict | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data, env)


def manifest(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "config_hash": cfg.config_hash(), "version": __version__, "seed": cfg.seed,
            "config": cfg.to_dict(), **extra}
