"""Evaluation: threshold sweeps, speed-up, FLOPs, and exit-indicator diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from distexit.exiting import ExitPolicy, ExitTrace, IndicatorTable, decide, infer_batch
from distexit.metrics import edr_array
from distexit.model import ModelConfig, MultiExitNet
from distexit.prototypes import PrototypeBank, adjust_prototypes_kmeans

# fixed per-element costs for the non-affine pieces
SOFTMAX_PER_CLASS = 3   # exp, add, divide
ENTROPY_PER_CLASS = 3   # log, multiply, add
TOP2_PER_CLASS = 2
COSINE_PER_DIM = 6      # dot product + two squared norms, 2 FLOPs each
COSINE_FIXED = 3        # two square roots and a divide
RATIO_FLOPS = 4
HARMONIC_FLOPS = 5


def affine_flops(d_in: int, d_out: int) -> int:
    """A multiply-accumulate is 2 FLOPs; plus one add per output for the bias."""
    return 2 * d_in * d_out + d_out


@dataclass(frozen=True)
class FlopsModel:
    """Per-component inference cost.

    ``blocks[m-1]`` is the cost of backbone block m (affine + activation);
    ``classifier`` includes the softmax; ``edr`` covers entropy, top-2
    selection, two cosine distances, the distance ratio and the harmonic mean.
    """

    blocks: tuple[int, ...]
    classifier: int
    projection: int
    edr: int

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "FlopsModel":
        blocks = tuple(affine_flops(cfg.d_in if m == 1 else cfg.d_hidden, cfg.d_hidden) + cfg.d_hidden
                       for m in range(1, cfg.n_layers + 1))
        classifier = affine_flops(cfg.d_hidden, cfg.n_classes) + SOFTMAX_PER_CLASS * cfg.n_classes
        projection = affine_flops(cfg.d_hidden, cfg.d_proto) if cfg.use_pn else 0
        edr = (ENTROPY_PER_CLASS * cfg.n_classes + TOP2_PER_CLASS * cfg.n_classes
               + 2 * (COSINE_PER_DIM * cfg.metric_dim + COSINE_FIXED) + RATIO_FLOPS + HARMONIC_FLOPS)
        return cls(blocks, classifier, projection, edr)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def layer_cost(self, m: int) -> int:
        cost = self.blocks[m - 1] + self.classifier
        if m < self.n_layers:
            cost += self.projection + self.edr
        return cost

    def cumulative(self) -> np.ndarray:
        """``cumulative()[m]`` is the cost of exiting at layer m (index 0 is 0)."""
        return np.concatenate([[0], np.cumsum([self.layer_cost(m) for m in range(1, self.n_layers + 1)])])


def flops_for_trace(flops: FlopsModel, trace: ExitTrace) -> int:
    return int(flops.cumulative()[trace.exit_layer])


def speedup_ratio(exit_histogram) -> float:
    """Layers of the full model over layers executed, pooled over all samples."""
    hist = np.asarray(exit_histogram, dtype=np.float64)
    if hist.ndim != 1 or hist.size == 0 or hist.sum() <= 0:
        raise ValueError("exit histogram is empty")
    M = hist.size
    return float(M * hist.sum() / np.sum(np.arange(1, M + 1) * hist))


@dataclass
class SweepRow:
    tau: float
    accuracy: float
    speedup: float
    mean_exit_layer: float
    exit_histogram: list[int]
    flops_total: int
    executed_layers_total: int
    wall_time_s: float | None = None


@dataclass
class SweepResult:
    policy: ExitPolicy
    rows: list[SweepRow]
    config_hash: str | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def csv_text(self) -> str:
        M = len(self.rows[0].exit_histogram) if self.rows else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "tau", "accuracy", "speedup", "mean_exit_layer", "flops_total",
                    "executed_layers_total", "wall_time_s"] + [f"exit_{m}" for m in range(1, M + 1)]
                   + ["config_hash"])
        for r in self.rows:
            w.writerow([self.policy.label, repr(r.tau), repr(r.accuracy), repr(r.speedup),
                        repr(r.mean_exit_layer), r.flops_total, r.executed_layers_total,
                        "" if r.wall_time_s is None else repr(r.wall_time_s)]
                       + list(r.exit_histogram) + [self.config_hash or ""])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())

    def to_dict(self) -> dict:
        return {"policy": self.policy.to_dict(), "label": self.policy.label,
                "config_hash": self.config_hash, "rows": [asdict(r) for r in self.rows]}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate_exits(exits: np.ndarray, preds: np.ndarray, labels: np.ndarray, n_layers: int,
                   flops: FlopsModel, tau: float) -> SweepRow:
    hist = np.bincount(exits, minlength=n_layers + 1)[1:]
    return SweepRow(
        tau=float(tau),
        accuracy=float(np.mean(preds == labels)),
        speedup=speedup_ratio(hist),
        mean_exit_layer=float(exits.mean()),
        exit_histogram=[int(c) for c in hist],
        flops_total=int(flops.cumulative()[exits].sum()),
        executed_layers_total=int(exits.sum()),
    )


def sweep(model: MultiExitNet, bank: PrototypeBank | None, X, y, policy: ExitPolicy, taus,
          table: IndicatorTable | None = None, flops: FlopsModel | None = None,
          measure_time: bool = False, config_hash: str | None = None) -> SweepResult:
    """One row per threshold, ordered by threshold.

    For ``patience`` the swept value is the patience count. ``table`` may be
    passed to reuse a forward pass across policies. With ``measure_time`` each
    row also records wall time of truncated per-sample inference.
    """
    taus = list(taus)
    if not taus:
        raise ValueError("need at least one threshold")
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    if table is None:
        table = IndicatorTable.compute(model, bank, X)
    flops = flops or FlopsModel.from_config(model.config)
    rows = []
    for tau in sorted(taus):
        pol = policy.with_threshold(tau)
        exits, preds = decide(pol, table, y)
        row = evaluate_exits(exits, preds, y, table.n_layers, flops, tau)
        if measure_time:
            t0 = time.perf_counter()
            infer_batch(model, bank, np.asarray(X), pol, y if pol.kind == "oracle" else None)
            row.wall_time_s = time.perf_counter() - t0
        rows.append(row)
    return SweepResult(policy, rows, config_hash)


class NoMatchingRow(LookupError):
    pass


def match_speedup(result: SweepResult, target: float, tol: float = 0.15) -> SweepRow:
    """Row whose speed-up is closest to ``target`` (ties: lower threshold)."""
    best = None
    for r in result.rows:
        gap = abs(r.speedup - target)
        if gap > tol:
            continue
        if best is None or gap < best[0] or (gap == best[0] and r.tau < best[1].tau):
            best = (gap, r)
    if best is None:
        raise NoMatchingRow(f"no row of {result.policy.label} within {tol} of speed-up {target}")
    return best[1]


def estimation_accuracy(indicator, correct, tau: float) -> float:
    """Fraction of samples where ``indicator < tau`` agrees with actual correctness."""
    indicator = np.asarray(indicator)
    correct = np.asarray(correct, dtype=bool)
    return float(np.mean((indicator < tau) == correct))


def _check_exit_layer(model: MultiExitNet, layer: int):
    M = model.config.n_layers
    if not 1 <= layer <= M - 1:
        raise ValueError(f"layer must lie in 1..{M - 1} (layer {M} has no prototypes), got {layer}")


def layer_indicators(model: MultiExitNet, bank: PrototypeBank, X, layer: int):
    """(entropy, distance_ratio, predicted) at one intermediate layer."""
    _check_exit_layer(model, layer)
    table = IndicatorTable.compute(model, bank, X)
    if table.distance_ratio is None:
        raise ValueError("prototypes are not initialized")
    return table.entropy[:, layer - 1], table.distance_ratio[:, layer - 1], table.predicted[:, layer - 1]


def correctness_estimation_accuracy(model: MultiExitNet, bank: PrototypeBank, X, y, layer: int, tau: float,
                                    lam: float = 1.0) -> tuple[float, float]:
    """How often entropy and EDR, thresholded at ``tau``, predict whether the
    layer's prediction is right. Returns ``(acc_entropy, acc_edr)``."""
    ent, dr, pred = layer_indicators(model, bank, X, layer)
    correct = pred == np.asarray(y)
    return estimation_accuracy(ent, correct, tau), estimation_accuracy(edr_array(ent, dr, lam), correct, tau)


def spearman(a, b) -> float:
    """Spearman rank correlation; NaN when either series is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two equal-length series of at least 2 values")
    if np.all(a == a[0]) or np.all(b == b[0]):
        return math.nan
    return float(stats.spearmanr(a, b).statistic)


def spearman_homogeneity(with_pn: tuple[MultiExitNet, PrototypeBank], without_pn: tuple[MultiExitNet, PrototypeBank],
                         X, layer: int) -> tuple[float, float]:
    """Rank correlation between entropy and distance ratio for both models.

    For a model built with ``use_pn=False`` the distance ratio is computed on
    the hidden state, since that is where its prototypes live.
    """
    rhos = []
    for model, bank in (with_pn, without_pn):
        ent, dr, _ = layer_indicators(model, bank, X, layer)
        rhos.append(spearman(ent, dr))
    return rhos[0], rhos[1]


def exit_distribution(row: SweepRow) -> np.ndarray:
    hist = np.asarray(row.exit_histogram, dtype=np.float64)
    return hist / hist.sum()


DEFAULT_TAUS = tuple(sorted(set(np.round(np.linspace(0.0, 1.0, 33), 12).tolist())
                            | {0.001, 0.007, 0.01, 0.07, 0.14}))
DEFAULT_LAMBDAS = (0.667, 1.0, 1.5, 2.0, 3.0)
DEFAULT_TARGETS = (2.0, 3.0)


def matching_grid(points: int = 401) -> tuple[float, ...]:
    """Thresholds for speed-up matching: an even grid plus a log-spaced low
    end, since confident models put most indicators far below 0.01."""
    even = np.linspace(0.0, 1.0, points)
    low = np.geomspace(1e-8, 1e-2, 61)
    return tuple(sorted(set(np.round(np.concatenate([even, low]), 14).tolist())))


FINE_TAUS = matching_grid()


def matched_accuracy(model, bank, X, y, policy: ExitPolicy, target: float, tol: float = 0.15,
                     taus=FINE_TAUS, table: IndicatorTable | None = None) -> SweepRow | None:
    """Sweep ``policy`` and return the row matched to ``target``, or None."""
    res = sweep(model, bank, X, y, policy, taus, table=table)
    try:
        return match_speedup(res, target, tol)
    except NoMatchingRow:
        return None


def select_edr_lambda(model, bank, dev, test, target: float, tol: float = 0.15, lams=DEFAULT_LAMBDAS,
                      taus=FINE_TAUS) -> dict | None:
    """Pick lambda by matched-speed-up accuracy on dev, then report it on test.

    Returns ``{"lam", "dev_accuracy", "row"}`` where ``row`` is the test row
    matched to ``target``; None when no lambda can be matched on both splits.
    Ties on dev go to the earlier lambda in ``lams``.
    """
    dev_table = IndicatorTable.compute(model, bank, dev[0])
    best = None
    for lam in lams:
        row = matched_accuracy(model, bank, dev[0], dev[1], ExitPolicy("edr", lam=lam), target, tol, taus,
                               dev_table)
        if row is not None and (best is None or row.accuracy > best[1]):
            best = (lam, row.accuracy)
    if best is None:
        return None
    row = matched_accuracy(model, bank, test[0], test[1], ExitPolicy("edr", lam=best[0]), target, tol, taus)
    if row is None:
        return None
    return {"lam": best[0], "dev_accuracy": best[1], "row": row}


def adjust_all_layers(bank: PrototypeBank, model: MultiExitNet, unlabeled_X, max_iters: int = 100,
                      tol: float = 1e-6) -> PrototypeBank:
    """K-means re-fit of every layer's prototypes on unlabeled inputs."""
    outs = model.forward_batch(np.asarray(unlabeled_X, dtype=np.float64))
    for m in range(1, model.config.n_layers):
        bank = adjust_prototypes_kmeans(bank, m, outs[m - 1].projected, max_iters, tol)
    return bank


def shift_evaluation(model: MultiExitNet, bank: PrototypeBank, unlabeled_X, X, y, lam: float = 1.0,
                     target: float = 2.5, tol: float = 0.15, taus=FINE_TAUS, adjust: bool = True) -> dict:
    """Edr accuracy on shifted data before and after K-means prototype adjustment.

    The threshold is matched to ``target`` before adjustment and reused after
    it (``after``); ``after_matched`` re-matches the threshold on the adjusted
    model. Missing conditions are None.
    """
    pol = ExitPolicy("edr", lam=lam)
    before = matched_accuracy(model, bank, X, y, pol, target, tol, taus)
    out = {"lam": lam, "target": target, "before": before, "after": None, "after_matched": None}
    if not adjust:
        return out
    adjusted = adjust_all_layers(bank, model, unlabeled_X)
    if before is not None:
        out["after"] = sweep(model, adjusted, X, y, pol, [before.tau]).rows[0]
    out["after_matched"] = matched_accuracy(model, adjusted, X, y, pol, target, tol, taus)
    out["bank"] = adjusted
    return out
