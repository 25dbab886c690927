"""Differentiable BLEU surrogate on encoder latents, and the two attacks built on it.

``bleuer_attack`` perturbs the encoder output directly by gradient ascent on
``MSE(f(z), target)`` and decodes from the perturbed latents. ``mbart_attack`` pulls
the same gradient back to the input embeddings and flips tokens with the
first-order rule of :mod:`advmt.grad_attack`.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .gateway import EncoderLatents, ModelAdapter
from .grad_attack import GradAttackConfig, _source, token_flip_loop
from .metrics import bert_score, sentence_bleu
from .records import AttackRecord

log = logging.getLogger(__name__)

HEAD_FORMAT = "advmt-bleuhead/1"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class BleuHead:
    """Mean-pool over latent positions, tanh MLP, sigmoid output in [0, 1]."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray], activation: str = "tanh"):
        if activation != "tanh":
            raise ValueError("only the tanh activation is implemented")
        if weights[-1].shape[1] != 1:
            raise ValueError("last layer must have width 1")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activation = activation
        self.pooling = "mean"

    @classmethod
    def init(cls, in_dim: int, hidden: tuple[int, ...] = (256,), seed: int = 0) -> "BleuHead":
        rng = np.random.default_rng(seed)
        widths = [in_dim, *hidden, 1]
        weights, biases = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (a + b))
            weights.append(rng.uniform(-limit, limit, size=(a, b)))
            biases.append(np.zeros(b))
        return cls(weights, biases)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @staticmethod
    def pool(z) -> np.ndarray:
        values = z.values if isinstance(z, EncoderLatents) else np.atleast_2d(np.asarray(z, dtype=np.float64))
        return values.mean(axis=0)

    def _forward(self, X: np.ndarray):
        acts = [X]
        h = X
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ W + b
            h = np.tanh(pre) if k < len(self.weights) - 1 else _sigmoid(pre)
            acts.append(h)
        return acts

    def predict_pooled(self, X: np.ndarray) -> np.ndarray:
        return self._forward(np.atleast_2d(X))[-1][:, 0]

    def predict(self, z) -> float:
        return float(self.predict_pooled(self.pool(z)[None, :])[0])

    def _backward(self, acts, dout: np.ndarray):
        """Backprop ``dL/df`` (shape B) through the stack; returns (dW, db, dX)."""
        dW, db = [], []
        f = acts[-1][:, 0]
        delta = (dout * f * (1.0 - f))[:, None]
        for k in range(len(self.weights) - 1, -1, -1):
            dW.append(acts[k].T @ delta)
            db.append(delta.sum(axis=0))
            delta = delta @ self.weights[k].T
            if k > 0:
                delta = delta * (1.0 - acts[k] ** 2)
        return dW[::-1], db[::-1], delta

    def grad_latents(self, z, target: float) -> np.ndarray:
        """Exact ``d (f(z) - target)^2 / dz`` for a k x h latent matrix."""
        values = z.values if isinstance(z, EncoderLatents) else np.atleast_2d(np.asarray(z, dtype=np.float64))
        acts = self._forward(values.mean(axis=0)[None, :])
        f = acts[-1][:, 0]
        _, _, dX = self._backward(acts, 2.0 * (f - target))
        return np.repeat(dX / values.shape[0], values.shape[0], axis=0)

    def to_dict(self) -> dict:
        return {"version": HEAD_FORMAT, "widths": self.widths, "activation": self.activation,
                "pooling": self.pooling, "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, data: dict) -> "BleuHead":
        if data.get("version") != HEAD_FORMAT:
            raise ValueError(f"unsupported head format {data.get('version')!r}")
        if data.get("pooling", "mean") != "mean":
            raise ValueError("only mean pooling is implemented")
        head = cls([np.array(w) for w in data["weights"]], [np.array(b) for b in data["biases"]],
                   data.get("activation", "tanh"))
        if head.widths != list(data["widths"]):
            raise ValueError("widths do not match the stored matrices")
        return head

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "BleuHead":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def head_grad(head: BleuHead, z, target: float) -> np.ndarray:
    return head.grad_latents(z, target)


@dataclass
class HeadTrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 0  # 0 = full batch
    validation_fraction: float = 0.2
    seed: int = 0
    hidden: tuple[int, ...] = (256,)
    weight_decay: float = 0.0
    restore_best: bool = True  # keep the epoch with the lowest validation MSE

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 0:
            raise ValueError("learning_rate must be positive; epochs and batch_size non-negative")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        self.hidden = tuple(self.hidden)


@dataclass
class TrainReport:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    n_train: int = 0
    n_val: int = 0
    degenerate: bool = False
    notes: list[str] = field(default_factory=list)
    val_correlation: float | None = None
    best_epoch: int = 0
    final_train_mse: float | None = None
    final_val_mse: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def build_head_dataset(corpus, model: ModelAdapter, metric: str = "bleu", provider=None):
    """(latents, target) pairs; target scores the model translation against the reference."""
    data = []
    for pair in corpus:
        src = model.tokenize(pair["src"])
        z = model.encode(src)
        hyp = model.translate(src).text
        if metric == "bleu":
            target = sentence_bleu(hyp, pair["ref"])
        elif metric == "bertscore":
            target = float(np.clip(bert_score(hyp, pair["ref"], provider)[2], 0.0, 1.0))
        else:
            raise ValueError(f"unsupported head target metric {metric!r}")
        data.append((z, target))
    return data


def _mse(head: BleuHead, X, y) -> float:
    if len(X) == 0:
        return float("nan")
    return float(np.mean((head.predict_pooled(X) - y) ** 2))


def train_head(dataset, config: HeadTrainConfig | None = None) -> tuple[BleuHead, TrainReport]:
    """Fit a BleuHead with Adam on the MSE to the targets; deterministic for a fixed seed."""
    config = config or HeadTrainConfig()
    if len(dataset) < 10:
        raise ValueError("need at least 10 examples to train a head")
    X = np.stack([BleuHead.pool(z) for z, _ in dataset])
    y = np.array([t for _, t in dataset], dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(X))
    n_val = int(round(len(X) * config.validation_fraction))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    Xtr, ytr, Xva, yva = X[tr_idx], y[tr_idx], X[val_idx], y[val_idx]

    head = BleuHead.init(X.shape[1], config.hidden, seed=config.seed)
    report = TrainReport(n_train=len(Xtr), n_val=len(Xva))
    if np.all(X.std(axis=0) < 1e-12):
        report.degenerate = True
        report.notes.append("constant latents: the head can only learn the mean target")
        log.warning("degenerate head dataset: all latents identical")
    if config.epochs == 0:
        report.notes.append("zero epochs: head left at initialization")

    report.train_mse.append(_mse(head, Xtr, ytr))
    report.val_mse.append(_mse(head, Xva, yva))
    params = head.weights + head.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    best = (report.val_mse[0], 0, None)
    bs = config.batch_size or len(Xtr)
    for _ in range(config.epochs):
        perm = rng.permutation(len(Xtr))
        for start in range(0, len(Xtr), bs):
            idx = perm[start:start + bs]
            acts = head._forward(Xtr[idx])
            f = acts[-1][:, 0]
            dW, db, _ = head._backward(acts, 2.0 * (f - ytr[idx]) / len(idx))
            step += 1
            for k, (p, g) in enumerate(zip(params, dW + db)):
                if config.weight_decay and k < len(head.weights):
                    g = g + config.weight_decay * p
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1 ** step)
                vhat = v[k] / (1 - b2 ** step)
                p -= config.learning_rate * mhat / (np.sqrt(vhat) + eps)
        report.train_mse.append(_mse(head, Xtr, ytr))
        report.val_mse.append(_mse(head, Xva, yva))
        if config.restore_best and len(Xva) and report.val_mse[-1] < best[0]:
            best = (report.val_mse[-1], len(report.val_mse) - 1, [p.copy() for p in params])
    if config.restore_best and len(Xva) and best[2] is not None and best[1] != len(report.val_mse) - 1:
        for p, saved in zip(params, best[2]):
            p[...] = saved
        report.notes.append(f"restored parameters from epoch {best[1]} (lowest validation MSE)")
    report.best_epoch = best[1] if best[2] is not None else len(report.val_mse) - 1
    report.final_val_mse = _mse(head, Xva, yva)
    report.final_train_mse = _mse(head, Xtr, ytr)
    if len(Xva) > 2 and np.std(yva) > 0:
        pred = head.predict_pooled(Xva)
        if np.std(pred) > 0:
            report.val_correlation = float(np.corrcoef(pred, yva)[0, 1])
    return head, report


@dataclass
class LatentAttackConfig:
    epsilon: float = 0.1
    steps: int = 1
    target: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 1:
            raise ValueError("epsilon must be >= 0 and steps >= 1")


def bleuer_attack(src, model: ModelAdapter, head: BleuHead, config: LatentAttackConfig | None = None,
                  ref: str | None = None) -> AttackRecord:
    """Latent-space attack: ``z <- z + epsilon * grad_z MSE(f(z), target)`` for ``steps`` steps."""
    config = config or LatentAttackConfig()
    src = _source(src, model)
    y = model.translate(src)
    z = model.encode(src)
    values = z.values.copy()
    trajectory = [head.predict(values)]
    for _ in range(config.steps):
        values = values + config.epsilon * head.grad_latents(values, config.target)
        trajectory.append(head.predict(values))
    y_att = model.decode_from_latents(EncoderLatents(values, z.source_len))
    return AttackRecord(
        attack_name="bleuer", x=src.text, x_att=src.text, y=y.text, y_att=y_att.text,
        hyperparams=asdict(config), ref=ref, model_id=model.model_id, latent_space=True,
        stop_reason="budget", meta={"predicted_bleu": trajectory,
                                    "latent_shift_norm": float(np.linalg.norm(values - z.values))},
    )


def mbart_attack(src, model: ModelAdapter, head: BleuHead, config: GradAttackConfig | None = None,
                 target: float = 1.0, ref: str | None = None) -> AttackRecord:
    """Token flips guided by the surrogate: the adversarial loss is ``-MSE(f(z), target)``."""
    config = config or GradAttackConfig()
    src = _source(src, model)
    y = model.translate(src)

    def grad_fn(cur):
        z = model.encode(cur)
        gz = head.grad_latents(z, target)
        return head.predict(z), -model.encode_vjp(cur, gz)

    cur, edits, stop = token_flip_loop(src, model, grad_fn, config.max_flips, config.constraints, config.ranking)
    y_att = model.translate(cur) if edits else y
    hp = config.as_dict()
    hp["target"] = target
    return AttackRecord(
        attack_name="mbart", x=src.text, x_att=cur.text if edits else src.text, y=y.text, y_att=y_att.text,
        hyperparams=hp, edit_log=edits, ref=ref, model_id=model.model_id, stop_reason=stop,
        meta={"x_ids": list(src.token_ids), "x_att_ids": list(cur.token_ids),
              "predicted_bleu_final": head.predict(model.encode(cur))},
    )
