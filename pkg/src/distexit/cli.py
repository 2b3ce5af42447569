"""Command-line entry point: ``distexit {gen,train,sweep,compare,diagnose,shift}``.

Configuration is resolved in three layers: built-in defaults, then a JSON
file given with ``--config`` (nested objects are merged key by key, lists
replace), then command-line flags. The resolved configuration is echoed to
``config.json`` in the output directory together with a content hash.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from distexit.checkpoint import Checkpoint, CheckpointError, CheckpointShapeError, load_checkpoint, to_bytes
from distexit.data import PRESETS, Dataset, DatasetFormatError, DatasetSpec, dataset_jsonl, generate, load_dataset
from distexit.exiting import ExitPolicy, IndicatorTable
from distexit.harness import (
    DEFAULT_LAMBDAS,
    DEFAULT_TARGETS,
    DEFAULT_TAUS,
    NoMatchingRow,
    SweepResult,
    correctness_estimation_accuracy,
    match_speedup,
    matching_grid,
    select_edr_lambda,
    shift_evaluation,
    spearman_homogeneity,
    sweep,
)
from distexit.model import ModelConfig, MultiExitNet
from distexit.plots import histogram_svg, tradeoff_svg
from distexit.training import TrainConfig, train

DEFAULT_POLICIES = (
    [{"kind": "edr", "lam": lam} for lam in DEFAULT_LAMBDAS]
    + [{"kind": "entropy"}, {"kind": "patience"}, {"kind": "confidence_patience", "patience": 2},
       {"kind": "oracle"}]
)

# moderate shift: this distance along the all-ones direction
MODERATE_SHIFT = 2.0


def default_config() -> dict:
    model = ModelConfig().to_dict()
    model["d_in"] = model["n_classes"] = None  # taken from the data unless given
    return {
        "data": DatasetSpec().to_dict(),
        "data_dir": None,
        "model": model,
        "train": TrainConfig().to_dict(),
        "policies": copy.deepcopy(DEFAULT_POLICIES),
        "taus": list(DEFAULT_TAUS),
        "match_grid_points": 401,
        "histogram_taus": [0.14, 0.4, 0.65],
        "target_speedups": list(DEFAULT_TARGETS),
        "speedup_tol": 0.15,
        "diagnose": {"layers": [2], "taus": [0.2], "lam": 1.0},
        "shift": {"vector": None, "magnitude": MODERATE_SHIFT, "lam": 1.0, "target_speedup": 2.5},
    }


class UsageError(ValueError):
    pass


def merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise UsageError(f"unknown config key {path + key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict) and key != "data":
            out[key] = merge(out[key], value, f"{path}{key}.")
        elif key == "data" and isinstance(value, dict):
            out[key] = {**out[key], **value}
        else:
            out[key] = copy.deepcopy(value)
    return out


def content_hash(payload: dict) -> str:
    """sha256 over a git-style blob header plus canonical JSON."""
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(b"blob %d\0" % len(body) + body).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Outputs:
    """Collects output files and writes them together at the end."""

    def __init__(self, out: Path, overwrite: bool, create: bool):
        if not out.exists():
            if not create:
                raise UsageError(f"output directory {out} does not exist (pass --create)")
            out.mkdir(parents=True)
        elif not out.is_dir():
            raise UsageError(f"{out} is not a directory")
        self.out = out
        self.overwrite = overwrite
        self.files: dict[str, bytes] = {}
        self._check("config.json")

    def _check(self, name: str):
        if not self.overwrite and (self.out / name).exists():
            raise UsageError(f"{self.out / name} exists (pass --overwrite)")

    def add(self, name: str, data):
        self.files[name] = data.encode() if isinstance(data, str) else data

    def add_csv(self, name: str, header: list, rows: list):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        self.add(name, buf.getvalue())

    def add_json(self, name: str, obj):
        self.add(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def commit(self) -> list[Path]:
        for name in self.files:
            self._check(name)
        written = []
        for name, data in sorted(self.files.items()):
            (self.out / name).write_bytes(data)
            written.append(self.out / name)
        return written


def resolve(args) -> dict:
    cfg = default_config()
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise UsageError(f"{args.config}: top level must be an object")
        cfg = merge(cfg, user)
    if getattr(args, "preset", None):
        cfg["data"] = PRESETS[args.preset].to_dict()
    if args.seed is not None:
        cfg["data"]["seed"] = cfg["model"]["seed"] = cfg["train"]["seed"] = args.seed
    if getattr(args, "data_dir", None):
        cfg["data_dir"] = args.data_dir
    for flag, section, key in (("steps", "train", "total_steps"), ("alpha", "train", "alpha"),
                               ("n_layers", "model", "n_layers")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    if getattr(args, "dar_variant", None):
        cfg["train"]["dar"] = {**cfg["train"]["dar"], "variant": args.dar_variant}
    if getattr(args, "no_pn", False):
        cfg["model"]["use_pn"] = False
    if getattr(args, "targets", None):
        cfg["target_speedups"] = args.targets
    if getattr(args, "tol", None) is not None:
        cfg["speedup_tol"] = args.tol
    if getattr(args, "layers", None):
        cfg["diagnose"]["layers"] = args.layers
    if getattr(args, "diag_taus", None):
        cfg["diagnose"]["taus"] = args.diag_taus
    if getattr(args, "magnitude", None) is not None:
        cfg["shift"]["magnitude"] = args.magnitude
        cfg["shift"]["vector"] = None
    if getattr(args, "target", None) is not None:
        cfg["shift"]["target_speedup"] = args.target
    return cfg


def load_splits(cfg: dict) -> tuple[Dataset, Dataset, Dataset]:
    if cfg["data_dir"]:
        d = Path(cfg["data_dir"])
        splits = []
        for name in ("train", "dev", "test"):
            path = d / f"{name}.jsonl"
            if not path.exists():
                raise UsageError(f"missing dataset file {path}")
            splits.append(load_dataset(path))
        return tuple(splits)
    return generate(DatasetSpec.from_dict(cfg["data"]))


def model_config(cfg: dict, splits) -> ModelConfig:
    d_in = splits[0].X.shape[1]
    n_classes = (int(max(int(s.y.max()) for s in splits if len(s)) + 1) if cfg["data_dir"]
                 else cfg["data"]["n_classes"])
    m = dict(cfg["model"])
    for key, value in (("d_in", d_in), ("n_classes", n_classes)):
        if m[key] is not None and m[key] != value:
            raise UsageError(f"model.{key}={m[key]} conflicts with the data ({value})")
        m[key] = value
    return ModelConfig.from_dict(m)


def open_checkpoint(path) -> Checkpoint:
    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def check_compatible(ckpt: Checkpoint, splits):
    d_in = splits[2].X.shape[1]
    if ckpt.config.d_in != d_in:
        raise CheckpointShapeError(f"checkpoint expects {ckpt.config.d_in} input features, data has {d_in}")


def policies(cfg: dict) -> list[ExitPolicy]:
    return [ExitPolicy(**p) for p in cfg["policies"]]


def swept_values(policy: ExitPolicy, cfg: dict, n_layers: int) -> list[float]:
    if policy.kind in ("patience", "fixed_layer"):
        return list(range(1, n_layers + 1))
    if policy.kind == "oracle":
        return [0.0]
    return list(cfg["taus"])


def match_taus(cfg: dict) -> list[float]:
    return sorted(set(cfg["taus"]) | set(matching_grid(cfg["match_grid_points"])))


def slug(policy: ExitPolicy) -> str:
    if policy.kind == "edr":
        return f"edr_lam{policy.lam:g}"
    if policy.kind == "confidence_patience":
        return f"confidence_patience_p{policy.patience}"
    return policy.kind


def echo(outputs: Outputs, command: str, cfg: dict, inputs: dict | None = None, notes: list | None = None):
    payload = {"command": command, "config": cfg, "inputs": inputs or {}}
    outputs.add_json("config.json", {**payload, "hash": content_hash(payload), "notes": notes or []})
    return content_hash(payload)


def cmd_gen(args, cfg) -> Outputs:
    outputs = Outputs(Path(args.out), args.overwrite, args.create)
    spec = DatasetSpec.from_dict(cfg["data"])
    for name, ds in zip(("train", "dev", "test"), generate(spec)):
        outputs.add(f"{name}.jsonl", dataset_jsonl(ds))
    echo(outputs, "gen", {"data": cfg["data"]})
    return outputs


def cmd_train(args, cfg) -> Outputs:
    outputs = Outputs(Path(args.out), args.overwrite, args.create)
    splits = load_splits(cfg)
    mcfg = model_config(cfg, splits)
    tcfg = TrainConfig.from_dict(cfg["train"])
    resume = None
    inputs = {}
    if args.resume:
        resume = open_checkpoint(args.resume)
        if resume.config != mcfg:
            diff = sorted(k for k, v in mcfg.to_dict().items() if resume.config.to_dict()[k] != v)
            raise CheckpointShapeError(f"checkpoint model config differs from the resolved config in {diff}")
        inputs["resume"] = file_digest(args.resume)
    model = MultiExitNet(mcfg)
    result = train(model, None, splits[0], splits[1], tcfg, resume=resume)
    outputs.add("best.ckpt", to_bytes(result.best))
    outputs.add("final.ckpt", to_bytes(result.final))
    outputs.add("report.csv", result.report.csv_text())
    outputs.add_json("report.json", result.report.summary())
    echo(outputs, "train", {k: cfg[k] for k in ("data", "data_dir", "model", "train")}, inputs)
    return outputs


def _sweep_all(ckpt: Checkpoint, cfg: dict, X, y, measure_time=False, config_hash=None) -> list[SweepResult]:
    table = IndicatorTable.compute(ckpt.model, ckpt.bank, X)
    out = []
    for pol in policies(cfg):
        if pol.kind == "edr" and table.distance_ratio is None:
            raise UsageError("checkpoint has uninitialized prototypes; edr policies cannot run")
        vals = swept_values(pol, cfg, ckpt.config.n_layers)
        out.append(sweep(ckpt.model, ckpt.bank, X, y, pol, vals, table=table, measure_time=measure_time,
                         config_hash=config_hash))
    return out


def cmd_sweep(args, cfg) -> Outputs:
    ckpt = open_checkpoint(args.checkpoint)
    outputs = Outputs(Path(args.out), args.overwrite, args.create)
    splits = load_splits(cfg)
    check_compatible(ckpt, splits)
    test = splits[2]
    keep = ("data", "data_dir", "policies", "taus", "histogram_taus")
    h = echo(outputs, "sweep", {k: cfg[k] for k in keep}, {"checkpoint": file_digest(args.checkpoint)})
    results = _sweep_all(ckpt, cfg, test.X, test.y, args.time, h)
    curves = []
    for res in results:
        name = slug(res.policy)
        outputs.add(f"sweep_{name}.csv", res.csv_text())
        outputs.add_json(f"sweep_{name}.json", res.to_dict())
        curves.append({"label": res.policy.label, "speedup": res.column("speedup").tolist(),
                       "accuracy": res.column("accuracy").tolist(), "point": res.policy.kind == "oracle"})
    outputs.add("tradeoff.svg", tradeoff_svg(curves))
    thresholded = [res.policy for res in results if res.policy.kind in ("edr", "entropy")]
    if thresholded:
        table = IndicatorTable.compute(ckpt.model, ckpt.bank, test.X)
        for tau in cfg["histogram_taus"]:
            series = {}
            for pol in thresholded:
                row = sweep(ckpt.model, ckpt.bank, test.X, test.y, pol, [tau], table=table).rows[0]
                series[pol.label] = row.exit_histogram
            outputs.add(f"exit_hist_tau{tau:g}.svg", histogram_svg(series, f"Exit layers at tau = {tau:g}"))
    return outputs


def cmd_compare(args, cfg) -> Outputs:
    ckpt = open_checkpoint(args.checkpoint)
    outputs = Outputs(Path(args.out), args.overwrite, args.create)
    splits = load_splits(cfg)
    check_compatible(ckpt, splits)
    dev, test = splits[1], splits[2]
    targets = [float(t) for t in cfg["target_speedups"]]
    tol = cfg["speedup_tol"]
    taus = match_taus(cfg)
    table = IndicatorTable.compute(ckpt.model, ckpt.bank, test.X)
    cells = []

    def cell(label, target, row, extra=None):
        entry = {"policy": label, "target": target, "available": row is not None}
        if row is not None:
            entry.update(accuracy=row.accuracy, speedup=row.speedup, tau=row.tau)
        entry.update(extra or {})
        cells.append(entry)

    for pol in policies(cfg):
        vals = taus if pol.kind not in ("patience", "fixed_layer", "oracle") else swept_values(pol, cfg, ckpt.config.n_layers)
        res = sweep(ckpt.model, ckpt.bank, test.X, test.y, pol, vals, table=table)
        for target in targets:
            try:
                row = match_speedup(res, target, tol)
            except NoMatchingRow:
                row = None
            cell(pol.label, target, row)
    lams = [p.lam for p in policies(cfg) if p.kind == "edr"]
    if len(lams) > 1:  # a lambda choice exists
        for target in targets:
            sel = select_edr_lambda(ckpt.model, ckpt.bank, (dev.X, dev.y), (test.X, test.y), target, tol, lams, taus)
            cell("edr(best dev lam)", target, None if sel is None else sel["row"],
                 {} if sel is None else {"lam": sel["lam"], "dev_accuracy": sel["dev_accuracy"]})
    labels = list(dict.fromkeys(c["policy"] for c in cells))
    rows = []
    for label in labels:
        row = [label]
        for target in targets:
            c = next(c for c in cells if c["policy"] == label and c["target"] == target)
            row.append(repr(c["accuracy"]) if c["available"] else "unavailable")
        rows.append(row)
    outputs.add_csv("compare.csv", ["policy"] + [f"acc@{t:g}x" for t in targets], rows)
    outputs.add_json("compare.json", {"tolerance": tol, "targets": targets, "cells": cells})
    keep = ("data", "data_dir", "policies", "taus", "match_grid_points", "target_speedups", "speedup_tol")
    echo(outputs, "compare", {k: cfg[k] for k in keep}, {"checkpoint": file_digest(args.checkpoint)})
    return outputs


def cmd_diagnose(args, cfg) -> Outputs:
    ckpt = open_checkpoint(args.checkpoint)
    M = ckpt.config.n_layers
    layers = [int(v) for v in cfg["diagnose"]["layers"]]
    for layer in layers:
        if not 1 <= layer <= M - 1:
            raise UsageError(f"diagnostic layer {layer} outside 1..{M - 1}: layer {M} has no prototypes")
    no_pn = None
    if args.checkpoint_no_pn:
        no_pn = open_checkpoint(args.checkpoint_no_pn)
    outputs = Outputs(Path(args.out), args.overwrite, args.create)
    splits = load_splits(cfg)
    check_compatible(ckpt, splits)
    test = splits[2]
    lam = cfg["diagnose"]["lam"]
    rows = []
    for layer in layers:
        for tau in cfg["diagnose"]["taus"]:
            a_ent, a_edr = correctness_estimation_accuracy(ckpt.model, ckpt.bank, test.X, test.y, layer, tau, lam)
            rows.append([layer, repr(float(tau)), repr(float(lam)), repr(a_ent), repr(a_edr)])
    outputs.add_csv("correctness.csv", ["layer", "tau", "lam", "acc_entropy", "acc_edr"], rows)
    notes = []
    inputs = {"checkpoint": file_digest(args.checkpoint)}
    if no_pn is None:
        notes.append("no no-PN checkpoint given; Spearman section omitted")
        print("notice: no no-PN checkpoint given; Spearman section omitted", file=sys.stderr)
    else:
        inputs["checkpoint_no_pn"] = file_digest(args.checkpoint_no_pn)
        sp = []
        for layer in layers:
            rho_with, rho_without = spearman_homogeneity((ckpt.model, ckpt.bank), (no_pn.model, no_pn.bank),
                                                         test.X, layer)
            sp.append([layer, repr(rho_with), repr(rho_without)])
        outputs.add_csv("spearman.csv", ["layer", "rho_with_pn", "rho_without_pn"], sp)
    echo(outputs, "diagnose", {k: cfg[k] for k in ("data", "data_dir", "diagnose")}, inputs, notes)
    return outputs


def shift_vector(cfg: dict, d_in: int) -> np.ndarray:
    vec = cfg["shift"]["vector"]
    if vec is not None:
        v = np.asarray(vec, dtype=np.float64)
        if v.shape != (d_in,):
            raise UsageError(f"shift vector has {v.size} entries, data has {d_in} features")
        return v
    return np.full(d_in, cfg["shift"]["magnitude"] / np.sqrt(d_in))


def cmd_shift(args, cfg) -> Outputs:
    ckpt = open_checkpoint(args.checkpoint)
    outputs = Outputs(Path(args.out), args.overwrite, args.create)
    splits = load_splits(cfg)
    check_compatible(ckpt, splits)
    v = shift_vector(cfg, ckpt.config.d_in)
    dev, test = splits[1], splits[2]
    s = cfg["shift"]
    rep = shift_evaluation(ckpt.model, ckpt.bank, dev.X + v, test.X + v, test.y, s["lam"], s["target_speedup"],
                           cfg["speedup_tol"], match_taus(cfg), adjust=not args.no_adjust)
    conditions = ["before"] if args.no_adjust else ["before", "after", "after_matched"]
    rows, report = [], {"shift": v.tolist(), "lam": s["lam"], "target_speedup": s["target_speedup"]}
    for cond in conditions:
        row = rep[cond]
        if row is None:
            rows.append([cond, "unavailable", "", "", ""])
            report[cond] = None
        else:
            rows.append([cond, repr(row.tau), repr(row.accuracy), repr(row.speedup), repr(row.mean_exit_layer)])
            report[cond] = {"tau": row.tau, "accuracy": row.accuracy, "speedup": row.speedup,
                            "mean_exit_layer": row.mean_exit_layer}
    outputs.add_csv("shift.csv", ["condition", "tau", "accuracy", "speedup", "mean_exit_layer"], rows)
    outputs.add_json("shift.json", report)
    if "bank" in rep:
        outputs.add("adjusted.ckpt", to_bytes(Checkpoint(ckpt.model, rep["bank"], ckpt.step, ckpt.adam,
                                                         {**ckpt.meta, "adjusted": True})))
    echo(outputs, "shift", {k: cfg[k] for k in ("data", "data_dir", "shift", "speedup_tol", "taus",
                                                  "match_grid_points")},
         {"checkpoint": file_digest(args.checkpoint)})
    return outputs


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "sweep": cmd_sweep, "compare": cmd_compare,
            "diagnose": cmd_diagnose, "shift": cmd_shift}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override its values)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="override the data, model and training seeds")
    common.add_argument("--overwrite", action="store_true", help="replace existing output files")
    common.add_argument("--create", action="store_true", help="create the output directory if missing")
    common.add_argument("--data-dir", help="read train/dev/test.jsonl from here instead of generating")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="distexit", description="Distance-enhanced early-exit experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--preset", choices=sorted(PRESETS))
    t = sub.add_parser("train", parents=[common], help="train a multi-exit model")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--steps", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--dar-variant", choices=["center", "alienation", "combined"])
    t.add_argument("--n-layers", type=int)
    t.add_argument("--no-pn", action="store_true", help="no projection head; distances on hidden states")
    for name, helptext in (("sweep", "threshold sweeps and trade-off plots"),
                           ("compare", "accuracy at matched speed-ups"),
                           ("diagnose", "correctness estimation and Spearman diagnostics"),
                           ("shift", "prototype adjustment under distribution shift")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--preset", choices=sorted(PRESETS))
        if name == "sweep":
            s.add_argument("--time", action="store_true", help="record wall time per row")
        if name == "compare":
            s.add_argument("--targets", type=float, nargs="+")
            s.add_argument("--tol", type=float)
        if name == "diagnose":
            s.add_argument("--checkpoint-no-pn")
            s.add_argument("--layers", type=int, nargs="+")
            s.add_argument("--taus", dest="diag_taus", type=float, nargs="+")
        if name == "shift":
            s.add_argument("--no-adjust", action="store_true", help="report only the unadjusted condition")
            s.add_argument("--magnitude", type=float)
            s.add_argument("--target", type=float)
            s.add_argument("--tol", type=float)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        outputs = COMMANDS[args.command](args, cfg)
        for path in outputs.commit():
            print(path)
    except (UsageError, ValueError, OSError, CheckpointError, DatasetFormatError) as exc:
        print(f"distexit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
