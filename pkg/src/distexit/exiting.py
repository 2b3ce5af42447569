"""Exit policies and early-exit inference.

``infer_one`` is the reference: it runs blocks one at a time and stops at the
exit layer, so no computation past the exit is performed. ``IndicatorTable``
computes every layer's indicators for a whole set at once; ``decide`` then
replays any policy over the table. Sweeps use the table so that a threshold
grid costs one forward pass, and tests check both paths agree.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from distexit.metrics import distance_ratio_array, edr_array, entropy_rows, cosine_distance_rows
from distexit.model import MultiExitNet
from distexit.prototypes import PrototypeBank

KINDS = ("edr", "entropy", "patience", "confidence_patience", "oracle", "fixed_layer")


@dataclass(frozen=True)
class ExitPolicy:
    kind: str = "edr"
    tau: float = 0.5
    lam: float = 1.0
    patience: int = 2
    fixed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; choose from {KINDS}")
        if self.kind in ("edr", "entropy", "confidence_patience") and not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1] for {self.kind}, got {self.tau}")
        if self.kind == "edr" and not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.kind in ("patience", "confidence_patience") and self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.kind == "fixed_layer" and (self.fixed is None or self.fixed < 1):
            raise ValueError("fixed_layer needs a 1-based layer index")

    @property
    def label(self) -> str:
        """Short human-readable name, e.g. ``edr(lam=1.5)``."""
        if self.kind == "edr":
            return f"edr(lam={self.lam:g})"
        if self.kind == "confidence_patience":
            return f"confidence_patience(p={self.patience})"
        if self.kind == "fixed_layer":
            return f"fixed_layer({self.fixed})"
        return self.kind

    def with_threshold(self, value) -> "ExitPolicy":
        """Policy with its swept parameter set.

        ``patience`` sweeps the counter and ``fixed_layer`` the layer index;
        every other kind sweeps tau.
        """
        if self.kind == "patience":
            return ExitPolicy(self.kind, self.tau, self.lam, int(value), self.fixed)
        if self.kind == "fixed_layer":
            return ExitPolicy(self.kind, self.tau, self.lam, self.patience, int(value))
        return ExitPolicy(self.kind, float(value), self.lam, self.patience, self.fixed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerIndicators:
    entropy: float
    distance_ratio: float | None
    edr: float | None
    predicted: int


@dataclass
class ExitTrace:
    exit_layer: int
    predicted: int
    per_layer: list[LayerIndicators] = field(default_factory=list)

    @property
    def blocks_executed(self) -> int:
        return len(self.per_layer)

    def to_json(self) -> str:
        return json.dumps({"exit_layer": self.exit_layer, "predicted": self.predicted,
                           "per_layer": [asdict(r) for r in self.per_layer]})

    @classmethod
    def from_json(cls, line: str) -> "ExitTrace":
        d = json.loads(line)
        return cls(d["exit_layer"], d["predicted"], [LayerIndicators(**r) for r in d["per_layer"]])


def write_traces_jsonl(traces, path) -> None:
    with open(path, "w") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")


def read_traces_jsonl(path) -> list[ExitTrace]:
    with open(path) as fh:
        return [ExitTrace.from_json(line) for line in fh if line.strip()]


def top2(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the two most probable classes per row; ties go to the lower index."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., 0], order[..., 1]


def _distance_ratios(projected: np.ndarray, probs: np.ndarray, protos: np.ndarray) -> np.ndarray:
    k1, k2 = top2(probs)
    r1 = cosine_distance_rows(projected, protos[k1])
    r2 = cosine_distance_rows(projected, protos[k2])
    return distance_ratio_array(r1, r2)


def _require_bank(bank: PrototypeBank | None, n_layers: int):
    if bank is None or not bank.initialized[: n_layers - 1].all():
        raise ValueError("edr exiting needs initialized prototypes for every class at layers 1..M-1")


def infer_one(model: MultiExitNet, bank: PrototypeBank | None, x, policy: ExitPolicy,
              label: int | None = None) -> ExitTrace:
    """Run layers in order until ``policy`` fires; layer M always exits."""
    M = model.config.n_layers
    if policy.kind == "oracle" and label is None:
        raise ValueError("oracle policy needs the true label")
    if policy.kind == "fixed_layer" and policy.fixed > M:
        raise ValueError(f"fixed layer {policy.fixed} beyond the last layer {M}")
    with_dr = bank is not None and bank.initialized[: M - 1].all()
    if policy.kind == "edr":
        _require_bank(bank, M)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.config.d_in,):
        raise ValueError(f"expected an input of shape ({model.config.d_in},), got {x.shape}")

    h = x[None, :]
    per_layer = []
    agree = 0
    confident = 0
    prev = None
    for m in range(1, M + 1):
        _, out = model.forward_layer(m, h)
        h = out.hidden
        probs = out.probs
        ent = float(entropy_rows(probs)[0])
        pred = int(top2(probs)[0][0])
        dr = ind = None
        if m < M and with_dr:
            dr = float(_distance_ratios(out.projected, probs, bank.layer(m)[0])[0])
            ind = float(edr_array(ent, dr, policy.lam))
        per_layer.append(LayerIndicators(ent, dr, ind, pred))

        agree = agree + 1 if pred == prev else 1
        prev = pred
        confident = confident + 1 if ent < policy.tau else 0
        kind = policy.kind
        if m == M:
            stop = True
        elif kind == "edr":
            stop = ind < policy.tau
        elif kind == "entropy":
            stop = ent < policy.tau
        elif kind == "patience":
            stop = agree >= policy.patience
        elif kind == "confidence_patience":
            stop = confident >= policy.patience
        elif kind == "oracle":
            stop = pred == label
        else:
            stop = m == policy.fixed
        if stop:
            return ExitTrace(m, pred, per_layer)
    raise AssertionError("unreachable")


def infer_batch(model, bank, inputs, policy: ExitPolicy, labels=None) -> list[ExitTrace]:
    """Independent per-sample decisions (batch size 1 semantics)."""
    if labels is None:
        labels = [None] * len(inputs)
    return [infer_one(model, bank, x, policy, lab) for x, lab in zip(inputs, labels)]


@dataclass
class IndicatorTable:
    """Per-sample, per-layer indicators for a fixed model, bank and input set.

    ``entropy`` and ``predicted`` are (N, M); ``distance_ratio`` is (N, M-1)
    and is None when the bank is not fully initialized.
    """

    entropy: np.ndarray
    distance_ratio: np.ndarray | None
    predicted: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.entropy.shape[1]

    def __len__(self) -> int:
        return self.entropy.shape[0]

    @classmethod
    def compute(cls, model: MultiExitNet, bank: PrototypeBank | None, X) -> "IndicatorTable":
        X = np.asarray(X, dtype=np.float64)
        M = model.config.n_layers
        if len(X) == 0:
            return cls(np.zeros((0, M)), np.zeros((0, M - 1)), np.zeros((0, M), dtype=np.int64))
        outs = model.forward_batch(X)
        ent = np.stack([entropy_rows(o.probs) for o in outs], axis=1)
        pred = np.stack([top2(o.probs)[0] for o in outs], axis=1)
        dr = None
        if bank is not None and bank.initialized[: M - 1].all():
            dr = np.stack([_distance_ratios(outs[m].projected, outs[m].probs, bank.layer(m + 1)[0])
                           for m in range(M - 1)], axis=1)
        return cls(ent, dr, pred)

    def edr(self, lam: float) -> np.ndarray:
        if self.distance_ratio is None:
            raise ValueError("edr needs initialized prototypes")
        return edr_array(self.entropy[:, :-1], self.distance_ratio, lam)


def _first_true(cond: np.ndarray) -> np.ndarray:
    cond = cond.copy()
    cond[:, -1] = True
    return np.argmax(cond, axis=1) + 1


def _run_lengths(flags: np.ndarray) -> np.ndarray:
    """Length of the run of consecutive True values ending at each column."""
    out = np.zeros(flags.shape, dtype=np.int64)
    run = np.zeros(flags.shape[0], dtype=np.int64)
    for m in range(flags.shape[1]):
        run = np.where(flags[:, m], run + 1, 0)
        out[:, m] = run
    return out


def decide(policy: ExitPolicy, table: IndicatorTable, labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized equivalent of ``infer_one`` over a precomputed table.

    Returns ``(exit_layers, predictions)`` with 1-based exit layers.
    """
    M = table.n_layers
    n = len(table)
    kind = policy.kind
    if kind == "edr":
        ind = table.edr(policy.lam)
        exits = _first_true(np.concatenate([ind < policy.tau, np.ones((n, 1), bool)], axis=1))
    elif kind == "entropy":
        exits = _first_true(table.entropy < policy.tau)
    elif kind == "patience":
        same = np.ones((n, M), dtype=bool)
        same[:, 0] = False
        same[:, 1:] = table.predicted[:, 1:] == table.predicted[:, :-1]
        agree = _run_lengths(same) + 1
        exits = _first_true(agree >= policy.patience)
    elif kind == "confidence_patience":
        exits = _first_true(_run_lengths(table.entropy < policy.tau) >= policy.patience)
    elif kind == "oracle":
        if labels is None:
            raise ValueError("oracle policy needs the true labels")
        exits = _first_true(table.predicted == np.asarray(labels)[:, None])
    else:
        if policy.fixed > M:
            raise ValueError(f"fixed layer {policy.fixed} beyond the last layer {M}")
        exits = np.full(n, policy.fixed, dtype=np.int64)
    preds = table.predicted[np.arange(n), exits - 1] if n else np.zeros(0, dtype=np.int64)
    return exits, preds
