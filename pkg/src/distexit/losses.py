"""Per-layer and whole-network loss assembly."""

from __future__ import annotations

import numpy as np


def layer_weights(n_layers: int) -> np.ndarray:
    """Weight of layer m is m / sum(1..M); deeper layers count more."""
    return np.arange(1, n_layers + 1) / (n_layers * (n_layers + 1) / 2)


def layer_loss(ce: float, dar: float, alpha: float, is_last: bool) -> float:
    """CE plus alpha-weighted DAR; the last layer has no DAR term."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if is_last or alpha == 0:
        return ce
    return ce + alpha * dar


def total_loss(layer_losses) -> float:
    """Layer-number-weighted average of the per-layer losses."""
    losses = np.asarray(layer_losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size < 1:
        raise ValueError("need a 1-D sequence with one loss per layer")
    m = np.arange(1, losses.size + 1)
    return float(np.sum(m * losses) / m.sum())
