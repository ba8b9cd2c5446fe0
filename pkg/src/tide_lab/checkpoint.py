"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"TIDECKPT"              8-byte magic
    u8                       format version
    u32 n, n bytes           config block, UTF-8 JSON with sorted keys
    u32                      record count
    records:
      u32 n, n bytes         name (UTF-8)
      u32 ndim
      u64 * ndim             shape
      f64 * prod(shape)      payload, row-major

The same container carries model parameters (``embed``, ``layers.{l}.*``,
``mem.k.{i}.table``, ``router.{l}.W`` ...), optimizer state, and compressed
memory tables (``mem.k.{i}.U``/``.V`` or ``.q{bits}`` + ``.scales``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import StreamParseError
from .model import ModelConfig, TideConfig, TideModel
from .autodiff import Tensor

MAGIC = b"TIDECKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    records: dict[str, np.ndarray] = field(default_factory=dict)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(ckpt.records)))
    for name, arr in ckpt.records.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise StreamParseError(f"{path}: truncated checkpoint at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise StreamParseError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<B", take(1))
    if version != VERSION:
        raise StreamParseError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    config = json.loads(take(n).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        records[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise StreamParseError(f"{path}: {len(buf) - pos} trailing bytes")
    return Checkpoint(config, records)


def model_checkpoint(model: TideModel, meta: dict | None = None, extra: dict | None = None) -> Checkpoint:
    config = model.config_dict()
    if meta:
        config["meta"] = meta
    records = {name: t.data for name, t in model.params.items()}
    if extra:
        records.update(extra)
    return Checkpoint(config, records)


def save_model(path, model: TideModel, meta: dict | None = None, extra: dict | None = None) -> None:
    write_checkpoint(path, model_checkpoint(model, meta, extra))


def model_from_checkpoint(ckpt: Checkpoint) -> TideModel:
    cfg = ModelConfig(**ckpt.config["model"])
    tide = TideConfig(**ckpt.config["tide"])
    skeleton = TideModel(cfg, tide, seed=0)
    params = {}
    for name, t in skeleton.params.items():
        if name not in ckpt.records:
            raise StreamParseError(f"checkpoint lacks parameter {name!r}")
        arr = ckpt.records[name]
        if arr.shape != t.shape:
            raise StreamParseError(f"parameter {name!r}: shape {arr.shape}, expected {t.shape}")
        params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    return TideModel(cfg, tide, params)


def load_model(path) -> TideModel:
    return model_from_checkpoint(read_checkpoint(path))
