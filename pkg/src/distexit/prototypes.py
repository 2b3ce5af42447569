"""Class prototypes per exit layer and the distance-aware regularizers.

Layers are numbered from 1 (the first intermediate layer) to M-1; the last
layer has no prototypes. Class labels are 0-based.

Prototypes never receive gradients: the DAR functions below return gradients
with respect to the sample representations only, treating the bank as
constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from distexit.metrics import NORM_EPS

DAR_VARIANTS = ("center", "alienation", "combined")


@dataclass
class PrototypeBank:
    """Per-layer, per-class prototype vectors.

    ``vectors`` has shape (M-1, K, d_proto); ``initialized`` has shape
    (M-1, K). Uninitialized rows hold zeros and are never read by distances.
    """

    vectors: np.ndarray
    initialized: np.ndarray
    gamma: float = 0.5

    @classmethod
    def empty(cls, n_layers: int, n_classes: int, dim: int, gamma: float = 0.5) -> "PrototypeBank":
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
        return cls(
            vectors=np.zeros((n_layers, n_classes, dim)),
            initialized=np.zeros((n_layers, n_classes), dtype=bool),
            gamma=float(gamma),
        )

    @property
    def n_layers(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_classes(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.vectors.copy(), self.initialized.copy(), self.gamma)

    def _row(self, layer: int) -> int:
        if not 1 <= layer <= self.n_layers:
            raise IndexError(f"layer {layer} outside 1..{self.n_layers}")
        return layer - 1

    def layer(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """(vectors, initialized) views for a 1-based layer."""
        i = self._row(layer)
        return self.vectors[i], self.initialized[i]

    def fully_initialized(self, layer: int) -> bool:
        return bool(self.initialized[self._row(layer)].all())


@dataclass(frozen=True)
class DarConfig:
    variant: str = "center"
    beta: float = 1.0

    def __post_init__(self):
        if self.variant not in DAR_VARIANTS:
            raise ValueError(f"unknown DAR variant {self.variant!r}; choose from {DAR_VARIANTS}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


def update_prototypes(bank: PrototypeBank, layer: int, reps, labels) -> PrototypeBank:
    """Sliding-average update of each present class toward its batch centroid.

    Mutates ``bank`` in place (single writer) and returns it. A class seen for
    the first time takes its centroid directly.
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    if reps.ndim != 2 or reps.shape[1] != bank.dim:
        raise ValueError(f"expected reps of shape (N, {bank.dim}), got {reps.shape}")
    if len(labels) != len(reps):
        raise ValueError("reps and labels differ in length")
    vecs, init = bank.layer(layer)
    g = bank.gamma
    for k in np.unique(labels):
        centroid = reps[labels == k].mean(axis=0)
        if init[k]:
            vecs[k] = (1.0 - g) * vecs[k] + g * centroid
        else:
            vecs[k] = centroid
            init[k] = True
    return bank


def _cos_parts(reps: np.ndarray, protos: np.ndarray):
    """Cosine distance between rows and its gradient w.r.t. the rows."""
    nu = np.linalg.norm(reps, axis=1, keepdims=True)
    nc = np.linalg.norm(protos, axis=1, keepdims=True)
    if np.any(nu <= NORM_EPS):
        raise ValueError("zero-norm sample representation")
    u_hat = reps / nu
    c_hat = protos / nc
    cos = np.sum(u_hat * c_hat, axis=1)
    dist = 1.0 - cos
    grad = -(c_hat - cos[:, None] * u_hat) / nu
    return dist, grad


def _weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError("sample weights must have one entry per sample")
    return w


def dar_center(reps, labels, bank: PrototypeBank, layer: int, weights=None, skip_uninitialized=False):
    """Mean cosine distance from each sample to its class prototype.

    Returns ``(loss, grads)`` with ``grads[n] = d loss / d reps[n]``.
    With ``skip_uninitialized`` samples whose prototype does not exist yet are
    left out of the average (and get zero gradient) instead of raising.
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    w = _weights(weights, len(reps))
    vecs, init = bank.layer(layer)
    keep = init[labels]
    if not keep.all() and not skip_uninitialized:
        missing = sorted(set(labels[~keep].tolist()))
        raise ValueError(f"uninitialized prototype(s) {missing} at layer {layer}")
    grads = np.zeros_like(reps)
    n = int(keep.sum())
    if n == 0:
        return 0.0, grads
    dist, g = _cos_parts(reps[keep], vecs[labels[keep]])
    loss = float(np.sum(w[keep] * dist)) / n
    grads[keep] = (w[keep] / n)[:, None] * g
    return loss, grads


def dar_alienation(reps, labels, bank: PrototypeBank, layer: int, weights=None, skip_uninitialized=False):
    """Mean distance ratio between own-class and nearest other-class prototype.

    The max() branch and the nearest-other-class choice are held fixed when
    differentiating; ties go to the ``r_own <= r_other`` branch.
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    w = _weights(weights, len(reps))
    vecs, init = bank.layer(layer)
    grads = np.zeros_like(reps)
    if init.sum() < 2:
        if skip_uninitialized:
            return 0.0, grads
        raise ValueError(f"alienation loss needs >= 2 initialized classes at layer {layer}")
    keep = init[labels]
    if not keep.all() and not skip_uninitialized:
        missing = sorted(set(labels[~keep].tolist()))
        raise ValueError(f"uninitialized prototype(s) {missing} at layer {layer}")
    n = int(keep.sum())
    if n == 0:
        return 0.0, grads
    x = reps[keep]
    y = labels[keep]
    k = bank.n_classes
    # distances to every class prototype; uninitialized/own classes masked out for z
    dists = np.empty((len(x), k))
    dgrads = np.empty((len(x), k, x.shape[1]))
    for c in range(k):
        if init[c]:
            dists[:, c], dgrads[:, c] = _cos_parts(x, np.broadcast_to(vecs[c], x.shape))
        else:
            dists[:, c] = np.inf
            dgrads[:, c] = 0.0
    rows = np.arange(len(x))
    r_y = dists[rows, y]
    g_y = dgrads[rows, y]
    masked = dists.copy()
    masked[rows, y] = np.inf
    z = np.argmin(masked, axis=1)
    r_z = dists[rows, z]
    g_z = dgrads[rows, z]

    term = np.empty(len(x))
    g = np.zeros_like(x)
    own_far = r_y > r_z
    both_zero = np.maximum(r_y, r_z) < NORM_EPS
    # r_y > r_z: 0.5 * (2 - r_z / r_y)
    a = own_far
    term[a] = 0.5 * (2.0 - r_z[a] / r_y[a])
    g[a] = 0.5 * (-g_z[a] / r_y[a][:, None] + (r_z[a] / r_y[a] ** 2)[:, None] * g_y[a])
    # r_y <= r_z: 0.5 * r_y / r_z
    b = ~own_far & ~both_zero
    term[b] = 0.5 * r_y[b] / r_z[b]
    g[b] = 0.5 * (g_y[b] / r_z[b][:, None] - (r_y[b] / r_z[b] ** 2)[:, None] * g_z[b])
    term[both_zero] = 0.5
    g[both_zero] = 0.0

    loss = float(np.sum(w[keep] * term)) / n
    grads[keep] = (w[keep] / n)[:, None] * g
    return loss, grads


def dar_combined(reps, labels, bank: PrototypeBank, layer: int, beta: float, weights=None,
                 skip_uninitialized=False):
    lc, gc = dar_center(reps, labels, bank, layer, weights, skip_uninitialized)
    if beta == 0:
        return lc, gc
    la, ga = dar_alienation(reps, labels, bank, layer, weights, skip_uninitialized)
    return lc + beta * la, gc + beta * ga


def dar(cfg: DarConfig, reps, labels, bank: PrototypeBank, layer: int, weights=None,
        skip_uninitialized=False):
    """Dispatch to the configured DAR variant."""
    if cfg.variant == "center":
        return dar_center(reps, labels, bank, layer, weights, skip_uninitialized)
    if cfg.variant == "alienation":
        return dar_alienation(reps, labels, bank, layer, weights, skip_uninitialized)
    return dar_combined(reps, labels, bank, layer, cfg.beta, weights, skip_uninitialized)


def _assign(points_hat: np.ndarray, centers: np.ndarray):
    c_hat = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    dist = np.clip(1.0 - points_hat @ c_hat.T, 0.0, 2.0)
    assign = np.argmin(dist, axis=1)
    return assign, float(dist[np.arange(len(points_hat)), assign].sum())


def kmeans_cosine(centers, points, max_iters: int = 100, tol: float = 1e-6):
    """Spherical K-means: cosine assignment, normalized-mean centers.

    A center moves to the mean of its members' unit vectors (the minimizer of
    the summed cosine distance), rescaled to the members' mean norm so centers
    keep the scale of the data. Returns ``(centers, assignment,
    objective_history)``; the history holds the summed cosine distance after
    every assignment step and never increases. Empty clusters keep their
    previous center.
    """
    centers = np.array(centers, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise ValueError("zero-norm point in K-means input")
    points_hat = points / norms
    assign, obj = _assign(points_hat, centers)
    history = [obj]
    for _ in range(max_iters):
        new = centers.copy()
        for k in range(len(centers)):
            members = assign == k
            if members.any():
                direction = points_hat[members].mean(axis=0)
                length = np.linalg.norm(direction)
                if length > NORM_EPS:
                    new[k] = direction / length * norms[members].mean()
        shift = np.linalg.norm(new - centers, axis=1).max()
        centers = new
        assign, obj = _assign(points_hat, centers)
        history.append(obj)
        if shift < tol:
            break
    return centers, assign, history


def adjust_prototypes_kmeans(bank: PrototypeBank, layer: int, unlabeled_reps, max_iters: int = 100,
                             tol: float = 1e-6) -> PrototypeBank:
    """Re-fit one layer's prototypes to unlabeled data, starting from the current ones.

    Returns a new bank; ``bank`` itself is left untouched.
    """
    reps = np.asarray(unlabeled_reps, dtype=np.float64)
    if len(reps) == 0:
        raise ValueError("no unlabeled representations given")
    if not bank.fully_initialized(layer):
        raise ValueError(f"every class prototype at layer {layer} must be initialized")
    out = bank.copy()
    vecs, _ = out.layer(layer)
    centers, _, _ = kmeans_cosine(vecs, reps, max_iters, tol)
    vecs[:] = centers
    return out
