"""Checkpoint container and OVCK binary format.

Layout: magic ``OVCK``, u16 LE version, u32 LE metadata length + UTF-8
JSON metadata (model kind, config, seed, epochs, source dataset, adam
hyperparameters), u32 LE parameter count, then per parameter a u16 LE
name length + name bytes + u32 LE blob length + TNSR blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .tensor import Tensor, tnsr_decode, tnsr_encode

_MAGIC = b"OVCK"
_VERSION = 1


@dataclass
class Checkpoint:
    kind: str                      # "vit" or a cnn kind
    config: dict                   # model config as plain values
    params: dict                   # name -> np.ndarray
    metadata: dict = field(default_factory=dict)
    version: int = _VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = dict(ckpt.metadata)
    meta["kind"] = ckpt.kind
    meta["config"] = ckpt.config
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", ckpt.version))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            blob = tnsr_encode(ckpt.params[name])
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", data[6:10])
    off = 10
    meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack("<I", data[off:off + 4])
    off += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", data[off:off + 2])
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (blob_len,) = struct.unpack("<I", data[off:off + 4])
        off += 4
        params[name] = tnsr_decode(data[off:off + blob_len])
        off += blob_len
    kind = meta.pop("kind")
    config = meta.pop("config")
    return Checkpoint(kind=kind, config=config, params=params, metadata=meta)


def snapshot_params(model) -> dict:
    """Copy a model's parameter values into plain arrays."""
    return {name: t.data.copy() for name, t in model.params.items()}


def load_params_into(model, params: dict, names=None) -> None:
    """Load arrays into a model's parameters, validating the name set.

    When ``names`` is given only that subset is loaded (and validated);
    otherwise the full name sets must match exactly.
    """
    if names is None:
        expected = set(model.params)
        got = set(params)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValidationError(
                f"parameter name mismatch: missing {missing}, extra {extra}"
            )
        names = expected
    for name in names:
        if name not in params:
            raise ValidationError(f"checkpoint lacks parameter {name!r}")
        src = np.asarray(params[name])
        dst = model.params[name]
        if src.shape != dst.data.shape:
            raise ValidationError(
                f"parameter {name!r}: checkpoint shape {src.shape} "
                f"vs model shape {dst.data.shape}"
            )
        dst.data = src.astype(dst.data.dtype).copy()
