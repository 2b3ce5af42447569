"""Mini-batch training: CE + DAR objective, AdamW, linear learning-rate decay."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from distexit.checkpoint import Checkpoint
from distexit.losses import layer_loss, total_loss  # noqa: F401  (public re-export)
from distexit.model import MultiExitNet
from distexit.prototypes import DarConfig, PrototypeBank

log = logging.getLogger(__name__)

__all__ = [
    "AdamW", "TrainConfig", "TrainReport", "TrainResult", "TrainingDiverged",
    "batch_indices", "layer_loss", "total_loss", "train",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, message: str, last_record: dict | None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.last_record = last_record


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01
    dar: DarConfig = field(default_factory=DarConfig)
    gamma: float = 0.5
    batch_size: int = 32
    learning_rate: float = 1e-2
    weight_decay: float = 0.01
    total_steps: int = 2000
    seed: int = 0
    eval_every: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("dar"), dict):
            d["dar"] = DarConfig(**d["dar"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``; decays linearly to zero, no warmup."""
        return self.learning_rate * (1.0 - step / self.total_steps)


class AdamW:
    """Adam with decoupled weight decay; parameters named ``*.bias`` are not decayed."""

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01,
                 state: dict | None = None):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        if state is None:
            self.t = 0
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        else:
            self.t = int(state["t"])
            self.m = {k: np.array(a) for k, a in state["m"].items()}
            self.v = {k: np.array(a) for k, a in state["v"].items()}

    def state(self) -> dict:
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay and not name.endswith(".bias"):
                p *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    best_step: int | None = None
    best_dev_accuracy: float | None = None
    config: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.records[0]["ce"]) if self.records else 0

    def csv_text(self) -> str:
        m = self.n_layers
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "lr", "total_loss"]
                   + [f"ce_{i}" for i in range(1, m + 1)]
                   + [f"dar_{i}" for i in range(1, m)]
                   + ["dev_accuracy"])
        for r in self.records:
            w.writerow([r["step"], repr(r["lr"]), repr(r["loss"])]
                       + [repr(x) for x in r["ce"]] + [repr(x) for x in r["dar"]]
                       + ["" if r["dev_accuracy"] is None else repr(r["dev_accuracy"])])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())

    def summary(self) -> dict:
        return {"best_step": self.best_step, "best_dev_accuracy": self.best_dev_accuracy,
                "steps": len(self.records), "config": self.config}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    model: MultiExitNet
    bank: PrototypeBank
    report: TrainReport
    final: Checkpoint
    best: Checkpoint


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the mini-batch used at 0-based ``step``.

    Each epoch is an independent seeded permutation, so any step's batch can
    be recomputed without replaying earlier ones (needed for resume).
    """
    per_epoch = -(-n // batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def final_layer_accuracy(model: MultiExitNet, X, y) -> float:
    probs = model.forward_batch(X)[-1].probs
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))


Observer = Callable[[int, str, MultiExitNet, PrototypeBank], None]


def train(model: MultiExitNet, bank: PrototypeBank | None, train_data, dev_data, cfg: TrainConfig,
          resume: Checkpoint | None = None, stop_at: int | None = None,
          observer: Observer | None = None) -> TrainResult:
    """Run ``cfg.total_steps`` optimizer steps (or up to ``stop_at``).

    Each step: forward, prototype update from the batch, DAR, backward,
    AdamW at the linearly decayed rate. ``model`` and ``bank`` are copied, not
    mutated. ``resume`` continues from a checkpoint's step counter, optimizer
    state and parameters. ``observer`` is called around every optimizer
    application with stage ``"before_optimizer"`` / ``"after_optimizer"``.
    """
    X, y = (np.asarray(a) for a in train_data)
    Xd, yd = (np.asarray(a) for a in dev_data)
    if len(X) == 0:
        raise ValueError("empty training set")
    X = X.astype(np.float64)
    start = 0
    adam_state = None
    if resume is not None:
        if resume.config != model.config:
            raise ValueError("resume checkpoint config differs from the model config")
        model, bank = resume.model, resume.bank
        start, adam_state = resume.step, resume.adam
    model = model.copy()
    cfg_m = model.config
    if bank is None:
        bank = PrototypeBank.empty(cfg_m.n_layers - 1, cfg_m.n_classes, cfg_m.metric_dim, cfg.gamma)
    else:
        bank = bank.copy()
    opt = AdamW(model.params, cfg.betas, cfg.eps, cfg.weight_decay, adam_state)
    report = TrainReport(config={"model": cfg_m.to_dict(), "train": cfg.to_dict()})
    if resume is not None:
        report.best_step = resume.meta.get("best_step")
        report.best_dev_accuracy = resume.meta.get("best_dev_accuracy")
    best = None
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(model.copy(), bank.copy(), step, opt.state(),
                          {"best_step": report.best_step, "best_dev_accuracy": report.best_dev_accuracy})

    for t in range(start, end):
        idx = batch_indices(len(X), cfg.batch_size, cfg.seed, t)
        lr = cfg.lr_at(t)
        try:
            loss, grads, ce, dars = model.loss_and_grads(
                X[idx], y[idx], bank, cfg.alpha, cfg.dar, update_bank=True)
        except FloatingPointError as exc:
            raise TrainingDiverged(t + 1, str(exc), report.records[-1] if report.records else None) from exc
        if observer:
            observer(t + 1, "before_optimizer", model, bank)
        opt.step(model.params, grads, lr)
        if observer:
            observer(t + 1, "after_optimizer", model, bank)
        rec = {"step": t + 1, "lr": lr, "loss": loss, "ce": ce, "dar": dars, "dev_accuracy": None}
        if (t + 1) % cfg.eval_every == 0 or t + 1 == end:
            acc = final_layer_accuracy(model, Xd, yd) if len(Xd) else float("nan")
            rec["dev_accuracy"] = acc
            if report.best_dev_accuracy is None or acc > report.best_dev_accuracy:
                report.best_step, report.best_dev_accuracy = t + 1, acc
                best = snapshot(t + 1)
            log.debug("step %d loss %.4f dev acc %.4f", t + 1, loss, acc)
        report.records.append(rec)

    final = snapshot(end)
    if best is None:
        best = final
    return TrainResult(model, bank, report, final, best)
