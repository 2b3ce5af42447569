"""Shared test oracles."""

import numpy as np

from distexit.model import ModelConfig, MultiExitNet
from distexit.prototypes import PrototypeBank, update_prototypes

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def central_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (x is perturbed in place and restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def assert_grad_close(analytic, numeric, rel=REL_TOL, floor=ABS_FLOOR, label=""):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = (diff > floor) & (diff > rel * scale)
    if bad.any():
        i = np.unravel_index(np.argmax(np.where(bad, diff / np.maximum(scale, 1e-300), 0)), bad.shape)
        raise AssertionError(f"{label}: gradient mismatch at {i}: analytic {analytic[i]!r}, numeric {numeric[i]!r}")


def trained_bank(model, X, y, gamma=0.5):
    cfg = model.config
    bank = PrototypeBank.empty(cfg.n_layers - 1, cfg.n_classes, cfg.metric_dim, gamma)
    outs = model.forward_batch(X)
    for m in range(1, cfg.n_layers):
        update_prototypes(bank, m, outs[m - 1].projected, y)
    return bank


def random_setup(seed, use_pn=True, activation="tanh"):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(
        n_layers=int(rng.integers(2, 4)), n_classes=int(rng.integers(2, 4)),
        d_in=int(rng.integers(1, 9)), d_hidden=int(rng.integers(2, 9)), d_proto=int(rng.integers(2, 9)),
        activation=activation, use_pn=use_pn, seed=seed,
    )
    model = MultiExitNet(cfg)
    for v in model.params.values():
        v += rng.normal(scale=0.3, size=v.shape)  # non-zero biases too
    n = int(rng.integers(2, 9))
    X = rng.normal(size=(n, cfg.d_in))
    y = rng.integers(0, cfg.n_classes, size=n)
    y[:2] = [0, 1]  # >= 2 classes present for the alienation term
    # prototypes from a different batch so they are not the batch centroids
    bank = trained_bank(model, rng.normal(size=(16, cfg.d_in)), np.arange(16) % cfg.n_classes)
    return model, X, y, bank
