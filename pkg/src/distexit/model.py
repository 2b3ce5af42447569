"""A small multi-exit network with hand-written backpropagation.

Each of the M layers is an affine map followed by tanh/relu. Every layer
feeds an internal classifier (one affine map + softmax); layers 1..M-1 also
feed a prototypical projection into the metric space where prototypes live.
With ``use_pn=False`` the projection is dropped and distances are measured
on the hidden state directly (the "without PN" ablation).

Parameters live in an ordered ``dict[str, ndarray]``; the insertion order is
the declared order used by checkpoints and the optimizer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from distexit.losses import layer_loss, layer_weights, total_loss
from distexit.prototypes import DarConfig, PrototypeBank, dar, update_prototypes

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    n_classes: int = 2
    d_in: int = 8
    d_hidden: int = 32
    d_proto: int = 16
    activation: str = "tanh"
    use_pn: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValueError("need at least 2 layers")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if min(self.d_in, self.d_hidden, self.d_proto) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def metric_dim(self) -> int:
        """Dimension of the space prototypes live in."""
        return self.d_proto if self.use_pn else self.d_hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerOutput:
    hidden: np.ndarray
    projected: np.ndarray | None
    probs: np.ndarray


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for m in range(1, cfg.n_layers + 1):
        fan_in = cfg.d_in if m == 1 else cfg.d_hidden
        shapes[f"block{m}.weight"] = (cfg.d_hidden, fan_in)
        shapes[f"block{m}.bias"] = (cfg.d_hidden,)
        shapes[f"exit{m}.weight"] = (cfg.n_classes, cfg.d_hidden)
        shapes[f"exit{m}.bias"] = (cfg.n_classes,)
        if cfg.use_pn and m < cfg.n_layers:
            shapes[f"proto{m}.weight"] = (cfg.d_proto, cfg.d_hidden)
            shapes[f"proto{m}.bias"] = (cfg.d_proto,)
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


class MultiExitNet:
    """Config + parameters, with forward and backward passes."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        expected = param_shapes(config)
        if list(self.params) != list(expected):
            raise ValueError("parameter names do not match the model config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape}, config expects {shape}")

    def copy(self) -> "MultiExitNet":
        return MultiExitNet(self.config, {k: v.copy() for k, v in self.params.items()})

    def _act(self, z):
        return np.tanh(z) if self.config.activation == "tanh" else np.maximum(z, 0.0)

    def _act_grad(self, z, h):
        if self.config.activation == "tanh":
            return 1.0 - h * h
        return (z > 0).astype(z.dtype)

    def forward_layer(self, layer: int, h_prev: np.ndarray):
        """Run block ``layer`` (1-based) on a batch; returns (z, LayerOutput)."""
        p = self.params
        z = h_prev @ p[f"block{layer}.weight"].T + p[f"block{layer}.bias"]
        h = self._act(z)
        logits = h @ p[f"exit{layer}.weight"].T + p[f"exit{layer}.bias"]
        _check_finite(f"layer {layer} logits", logits)
        probs = _softmax(logits)
        projected = None
        if layer < self.config.n_layers:
            if self.config.use_pn:
                projected = h @ p[f"proto{layer}.weight"].T + p[f"proto{layer}.bias"]
            else:
                projected = h
        return z, LayerOutput(h, projected, probs)

    def forward_batch(self, X) -> list[LayerOutput]:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.config.d_in:
            raise ValueError(f"expected inputs of shape (N, {self.config.d_in}), got {X.shape}")
        _check_finite("input", X)
        outs = []
        h = X
        for m in range(1, self.config.n_layers + 1):
            _, out = self.forward_layer(m, h)
            outs.append(out)
            h = out.hidden
        return outs

    def forward(self, x) -> list[LayerOutput]:
        """All M layer outputs for a single input vector."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.config.d_in,):
            raise ValueError(f"expected an input of shape ({self.config.d_in},), got {x.shape}")
        return [
            LayerOutput(o.hidden[0], None if o.projected is None else o.projected[0], o.probs[0])
            for o in self.forward_batch(x[None, :])
        ]

    def loss_and_grads(self, X, y, bank: PrototypeBank | None, alpha: float, dar_cfg: DarConfig,
                       weights=None, skip_uninitialized: bool = True, update_bank: bool = False):
        """Layer-weighted CE + alpha * DAR loss and its exact parameter gradients.

        Layer m carries weight m / sum(1..M); DAR applies to layers 1..M-1.
        Prototypes in ``bank`` are constants. With ``update_bank`` the bank is
        first moved toward this batch's class centroids (in place), so DAR sees
        the updated prototypes. Returns
        ``(total_loss, grads, ce_per_layer, dar_per_layer)``.
        """
        cfg = self.config
        p = self.params
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        n = len(X)
        if n == 0:
            raise ValueError("empty batch")
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        M = cfg.n_layers
        layer_w = layer_weights(M)

        zs, outs = [], []
        h = X
        for m in range(1, M + 1):
            z, out = self.forward_layer(m, h)
            zs.append(z)
            outs.append(out)
            h = out.hidden
        if update_bank and bank is not None:
            for m in range(1, M):
                update_prototypes(bank, m, outs[m - 1].projected, y)

        rows = np.arange(n)
        onehot = np.zeros((n, cfg.n_classes))
        onehot[rows, y] = 1.0
        ce, dars, per_layer = [], [], []
        grads = {}
        d_logits, d_proj = [], []
        for m in range(1, M + 1):
            out = outs[m - 1]
            nll = -np.log(np.maximum(out.probs[rows, y], 1e-300))
            ce_m = float(np.sum(w * nll)) / n
            ce.append(ce_m)
            d_logits.append(layer_w[m - 1] * (w / n)[:, None] * (out.probs - onehot))
            dar_m = 0.0
            if m < M:
                g = None
                if bank is not None:
                    dar_m, g = dar(dar_cfg, out.projected, y, bank, m, w, skip_uninitialized)
                d_proj.append(layer_w[m - 1] * alpha * g if alpha != 0 and g is not None else None)
                dars.append(dar_m)
            per_layer.append(layer_loss(ce_m, dar_m, alpha, m == M))
        total = total_loss(per_layer)
        if not np.isfinite(total):
            raise FloatingPointError("non-finite training loss")

        dh_next = None
        for m in range(M, 0, -1):
            out = outs[m - 1]
            h_in = X if m == 1 else outs[m - 2].hidden
            dl = d_logits[m - 1]
            grads[f"exit{m}.weight"] = dl.T @ out.hidden
            grads[f"exit{m}.bias"] = dl.sum(axis=0)
            dh = dl @ p[f"exit{m}.weight"]
            if m < M and d_proj[m - 1] is not None:
                de = d_proj[m - 1]
                if cfg.use_pn:
                    grads[f"proto{m}.weight"] = de.T @ out.hidden
                    grads[f"proto{m}.bias"] = de.sum(axis=0)
                    dh = dh + de @ p[f"proto{m}.weight"]
                else:
                    dh = dh + de
            elif m < M and cfg.use_pn:
                grads[f"proto{m}.weight"] = np.zeros_like(p[f"proto{m}.weight"])
                grads[f"proto{m}.bias"] = np.zeros_like(p[f"proto{m}.bias"])
            if dh_next is not None:
                dh = dh + dh_next
            dz = dh * self._act_grad(zs[m - 1], out.hidden)
            grads[f"block{m}.weight"] = dz.T @ h_in
            grads[f"block{m}.bias"] = dz.sum(axis=0)
            dh_next = dz @ p[f"block{m}.weight"]

        grads = {name: grads[name] for name in p}
        return float(total), grads, ce, dars

