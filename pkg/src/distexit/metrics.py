"""Exit indicators: normalized entropy, cosine distance, distance ratio, EDR.

Scalar functions validate their inputs and are what the rest of the package
reasons about. The ``*_rows`` / ``*_array`` variants are the vectorized
forms used on whole batches by the harness; they skip validation but apply
the same clamping rules so both paths agree.
"""

from __future__ import annotations

import math

import numpy as np

PROB_EPS = 1e-12
NORM_EPS = 1e-9
SUM_TOL = 1e-6


def normalized_entropy(p) -> float:
    """Entropy of ``p`` divided by the entropy of the uniform distribution.

    Returns a value in [0, 1]; 0 for a one-hot vector, 1 for uniform.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError(f"need a 1-D distribution over K >= 2 classes, got shape {p.shape}")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must be finite and lie in [0, 1]")
    if abs(float(p.sum()) - 1.0) > SUM_TOL:
        raise ValueError(f"probabilities sum to {p.sum():.9g}, not 1")
    return float(entropy_rows(p[None, :])[0])


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Row-wise normalized entropy of an (N, K) probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[-1]
    clamped = np.maximum(probs, PROB_EPS)
    ent = np.sum(clamped * np.log(clamped), axis=-1) / math.log(1.0 / k)
    return np.clip(ent, 0.0, 1.0)


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu <= NORM_EPS or nv <= NORM_EPS:
        raise ValueError("cosine distance undefined for a zero-norm vector")
    return min(max(1.0 - float(u @ v) / (nu * nv), 0.0), 2.0)


def cosine_distance_rows(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cosine distance between matching rows of ``u`` and ``v`` (broadcasting)."""
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu <= NORM_EPS) or np.any(nv <= NORM_EPS):
        raise ValueError("cosine distance undefined for a zero-norm vector")
    cos = np.sum(u * v, axis=-1) / (nu * nv)
    return np.clip(1.0 - cos, 0.0, 2.0)


def distance_ratio(r1: float, r2: float) -> float:
    """0.5 * (1 + (r1 - r2) / max(r1, r2)); 0.5 when both distances vanish."""
    if not (0.0 <= r1 <= 2.0 and 0.0 <= r2 <= 2.0):
        raise ValueError(f"distances must lie in [0, 2], got ({r1}, {r2})")
    return float(distance_ratio_array(np.float64(r1), np.float64(r2)))


def distance_ratio_array(r1, r2) -> np.ndarray:
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    top = np.maximum(r1, r2)
    safe = np.where(top < NORM_EPS, 1.0, top)
    dr = np.where(top < NORM_EPS, 0.5, 0.5 * (1.0 + (r1 - r2) / safe))
    return np.clip(dr, 0.0, 1.0)


def edr(entropy: float, dr: float, lam: float) -> float:
    """Weighted harmonic mean of entropy and distance ratio.

    ``lam`` weights the distance ratio. A zero argument gives 0, the limit of
    the harmonic mean.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return float(edr_array(np.float64(entropy), np.float64(dr), lam))


def edr_array(entropy, dr, lam: float) -> np.ndarray:
    entropy = np.asarray(entropy, dtype=np.float64)
    dr = np.asarray(dr, dtype=np.float64)
    zero = (entropy < PROB_EPS) | (dr < PROB_EPS)
    e = np.where(zero, 1.0, entropy)
    d = np.where(zero, 1.0, dr)
    val = (lam + 1.0) / (lam / d + 1.0 / e)
    return np.clip(np.where(zero, 0.0, val), 0.0, 1.0)
