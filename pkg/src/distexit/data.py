"""Synthetic classification tasks with an easy/hard difficulty mixture.

Each class has a mean on a regular simplex. Easy samples sit around the
vertex of a simplex with edge ``easy_margin``; hard ones around a simplex
with edge ``hard_margin`` (usually overlapping). Noise is unit isotropic
Gaussian. Labels are 0-based.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 2
    d_in: int = 8
    n_train: int = 10_000
    n_dev: int = 1_000
    n_test: int = 2_000
    easy_fraction: float = 0.5
    easy_margin: float = 6.0
    hard_margin: float = 1.5
    label_noise: float = 0.0
    shift: tuple[float, ...] | None = None
    seed: int = 42

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.d_in < self.n_classes - 1:
            raise ValueError("d_in must be >= n_classes - 1 to hold the class simplex")
        for name in ("n_train", "n_dev", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("easy_fraction", "label_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not (self.easy_margin > 0 and self.hard_margin > 0):
            raise ValueError("margins must be positive")
        if self.shift is not None and len(self.shift) != self.d_in:
            raise ValueError(f"shift has {len(self.shift)} entries, d_in is {self.d_in}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shift"] = None if self.shift is None else list(self.shift)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        if d.get("shift") is not None:
            d["shift"] = tuple(float(v) for v in d["shift"])
        return cls(**d)


PRESETS = {
    "easy": DatasetSpec(n_train=2000, n_dev=500, n_test=500, easy_fraction=1.0, easy_margin=8.0,
                        hard_margin=8.0),
    "default": DatasetSpec(),
}


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self):
        # unpacks as (X, y)
        return iter((self.X, self.y))


def simplex_vertices(k: int, dim: int) -> np.ndarray:
    """K points in R^dim with all pairwise distances equal to 1, centered at 0."""
    centered = np.eye(k) - 1.0 / k
    # orthonormal basis of the (k-1)-dim subspace the centered one-hots span
    basis, _, _ = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ basis[:, : k - 1]
    out = np.zeros((k, dim))
    out[:, : k - 1] = coords / np.sqrt(2.0)
    return out


def _draw(spec: DatasetSpec, n: int, rng: np.random.Generator) -> Dataset:
    verts = simplex_vertices(spec.n_classes, spec.d_in)
    y_true = rng.integers(0, spec.n_classes, size=n)
    easy = rng.random(n) < spec.easy_fraction
    margin = np.where(easy, spec.easy_margin, spec.hard_margin)
    X = verts[y_true] * margin[:, None] + rng.standard_normal((n, spec.d_in))
    y = y_true.copy()
    flip = rng.random(n) < spec.label_noise
    if flip.any():
        # move to a uniformly chosen *different* class
        offset = rng.integers(1, spec.n_classes, size=int(flip.sum()))
        y[flip] = (y_true[flip] + offset) % spec.n_classes
    return Dataset(X, y)


def generate(spec: DatasetSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic (train, dev, test) splits; ``spec.shift`` moves only test."""
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    train, dev, test = (_draw(spec, n, np.random.default_rng(s))
                        for n, s in zip((spec.n_train, spec.n_dev, spec.n_test), seeds))
    if spec.shift is not None:
        test = Dataset(test.X + np.asarray(spec.shift, dtype=np.float64), test.y)
    return train, dev, test


def clean_labels(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Labels of each split before label noise (regenerated from the same seeds)."""
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    out = []
    for n, s in zip((spec.n_train, spec.n_dev, spec.n_test), seeds):
        out.append(np.random.default_rng(s).integers(0, spec.n_classes, size=n))
    return tuple(out)


class DatasetFormatError(ValueError):
    pass


def dataset_jsonl(ds: Dataset) -> str:
    """JSONL text, one ``{"x": [...], "y": int}`` object per line."""
    return "".join(json.dumps({"x": [float(v) for v in x], "y": int(label)}) + "\n"
                   for x, label in zip(ds.X, ds.y))


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dataset_jsonl(ds))


def load_dataset(path) -> Dataset:
    xs, ys = [], []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                x = rec["x"]
                label = rec["y"]
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not isinstance(label, int) or isinstance(label, bool) or label < 0:
                raise DatasetFormatError(f"{path}:{lineno}: label must be a non-negative integer, got {label!r}")
            if not isinstance(x, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                  for v in x):
                raise DatasetFormatError(f"{path}:{lineno}: x must be an array of numbers")
            if dim is None:
                dim = len(x)
            elif len(x) != dim:
                raise DatasetFormatError(f"{path}:{lineno}: dimension {len(x)} differs from {dim}")
            xs.append(x)
            ys.append(label)
    if not xs:
        return Dataset(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
    return Dataset(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64))


def _bucket(token: str, d: int) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little") % d


def hash_text(text: str, d: int) -> np.ndarray:
    """Whitespace-tokenized, hashed bag of words, L2-normalized."""
    v = np.zeros(d)
    for tok in text.lower().split():
        v[_bucket(tok, d)] += 1.0
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def load_text_csv(path, d: int) -> tuple[Dataset, list[str]]:
    """Read a ``text,label`` CSV (header required) into hashed features.

    Returns the dataset and the label vocabulary; label ``i`` in the dataset
    is ``vocab[i]`` (sorted order, numerically when every label is an int).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["text", "label"]:
            raise DatasetFormatError(f"{path}: header row 'text,label' required")
        rows = []
        for lineno, row in enumerate(reader, 2):
            if len(row) < 2:
                raise DatasetFormatError(f"{path}:{lineno}: expected two columns")
            rows.append((row[0], row[1].strip()))
    labels = sorted({r[1] for r in rows})
    try:
        labels = sorted(labels, key=int)
    except ValueError:
        pass
    index = {lab: i for i, lab in enumerate(labels)}
    X = np.array([hash_text(t, d) for t, _ in rows]).reshape(len(rows), d)
    y = np.array([index[lab] for _, lab in rows], dtype=np.int64)
    return Dataset(X, y), labels
