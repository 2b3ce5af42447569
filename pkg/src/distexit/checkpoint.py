"""Single-file checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic  b"DSTXCKPT"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header (sorted keys)
    ...       tensor payload, raw little-endian arrays back to back
    32 bytes  SHA-256 of every preceding byte

The header holds the model config, prototype gamma, training-step counter,
free-form ``meta`` and a tensor manifest ``[{name, dtype, shape, offset,
nbytes}]``. Tensors are written in this order: model parameters in declared
order (``block1.weight``, ``block1.bias``, ``exit1.weight``, ``exit1.bias``,
``proto1.weight``, ``proto1.bias``, ``block2.weight``, ...), then
``bank.vectors`` and ``bank.initialized``, then optimizer moments
``adam.m.<param>`` / ``adam.v.<param>`` when present.

Nothing in the file depends on wall-clock time, so identical states produce
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from distexit.model import ModelConfig, MultiExitNet, param_shapes
from distexit.prototypes import PrototypeBank

MAGIC = b"DSTXCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: MultiExitNet
    bank: PrototypeBank
    step: int = 0
    adam: dict | None = None  # {"t": int, "m": {name: arr}, "v": {name: arr}}
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def _tensors(ckpt: Checkpoint):
    for name, arr in ckpt.model.params.items():
        yield name, arr
    yield "bank.vectors", ckpt.bank.vectors
    yield "bank.initialized", ckpt.bank.initialized.astype(np.uint8)
    if ckpt.adam is not None:
        for name in ckpt.model.params:
            yield f"adam.m.{name}", ckpt.adam["m"][name]
        for name in ckpt.model.params:
            yield f"adam.v.{name}", ckpt.adam["v"][name]


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in _tensors(ckpt):
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        manifest.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_config": ckpt.model.config.to_dict(),
        "gamma": ckpt.bank.gamma,
        "step": int(ckpt.step),
        "adam_t": None if ckpt.adam is None else int(ckpt.adam["t"]),
        "meta": ckpt.meta,
        "tensors": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CorruptCheckpointError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError("bad magic bytes")
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version} is newer than supported {FORMAT_VERSION}")
    if version < 1:
        raise CheckpointVersionError(f"unknown checkpoint format {version}")
    body, digest = data[:-32], data[-32:]
    if len(data) < _PREFIX.size + hlen + 32 or hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checksum mismatch (truncated or modified file)")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen])
    except ValueError as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from exc
    payload = memoryview(body)[_PREFIX.size + hlen:]

    arrays = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        arrays[t["name"]] = arr.astype(arr.dtype.newbyteorder("="))  # owned, native order

    cfg = ModelConfig.from_dict(header["model_config"])
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name not in arrays:
            raise CheckpointShapeError(f"missing tensor {name}")
        if arrays[name].shape != shape:
            raise CheckpointShapeError(f"{name}: stored shape {arrays[name].shape}, config implies {shape}")
        params[name] = arrays[name]
    bank_shape = (cfg.n_layers - 1, cfg.n_classes, cfg.metric_dim)
    if arrays["bank.vectors"].shape != bank_shape:
        raise CheckpointShapeError(f"prototype bank shape {arrays['bank.vectors'].shape}, expected {bank_shape}")
    bank = PrototypeBank(arrays["bank.vectors"], arrays["bank.initialized"].astype(bool), header["gamma"])
    adam = None
    if header["adam_t"] is not None:
        adam = {"t": header["adam_t"],
                "m": {n: arrays[f"adam.m.{n}"] for n in shapes},
                "v": {n: arrays[f"adam.v.{n}"] for n in shapes}}
    return Checkpoint(MultiExitNet(cfg, params), bank, header["step"], adam, header["meta"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
