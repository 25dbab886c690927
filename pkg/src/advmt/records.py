from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any


@dataclass
class AttackRecord:
    """One attacked sentence: original/adversarial input and translation plus the edit log."""

    attack_name: str
    x: str
    x_att: str
    y: str
    y_att: str
    hyperparams: dict[str, Any] = field(default_factory=dict)
    edit_log: list[dict[str, Any]] = field(default_factory=list)
    ref: str | None = None
    seed: int | None = None
    model_id: str | None = None
    latent_space: bool = False
    stop_reason: str | None = None
    meta: dict[str, Any] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)
    record_id: int | None = None
    key: dict[str, Any] | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AttackRecord":
        names = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in data.items() if k in names})
