"""Binary checkpoints: named little-endian float64 tensors plus a config snapshot.

Layout (all integers little-endian u32 unless noted)::

    b"SCFR" | version | len + config text (UTF-8) | len + metadata JSON (UTF-8)
    | record count | records...

    record := len + name (UTF-8) | rank | dims[rank] | float64 LE data

Record names are prefixed ``param:``, ``buffer:`` or ``velocity:``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .model import FerModel
from .optim import SgdState

MAGIC = b"SCFR"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    model: FerModel
    state: SgdState | None = None
    meta: dict = field(default_factory=dict)


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _blob(data: bytes) -> bytes:
    return _u32(len(data)) + data


def encode_checkpoint(model: FerModel, config: RunConfig, state: SgdState | None = None,
                      meta: dict | None = None) -> bytes:
    meta = dict(meta or {})
    records: list[tuple[str, np.ndarray]] = [(f"param:{n}", p.data) for n, p in model.named_parameters()]
    records += [(f"buffer:{n}", b) for n, b in model.named_buffers()]
    if state is not None:
        meta["sgd"] = {
            "lr_backbone": state.lr_backbone, "lr_heads": state.lr_heads, "momentum": state.momentum,
            "weight_decay": state.weight_decay, "decay_factor": state.decay_factor, "epoch": state.epoch,
        }
        records += [(f"velocity:{n}", v) for n, v in sorted(state.velocity.items())]

    parts = [MAGIC, _u32(VERSION), _blob(config.to_text().encode("utf-8")),
             _blob(json.dumps(meta, sort_keys=True).encode("utf-8")), _u32(len(records))]
    for name, arr in records:
        parts.append(_blob(name.encode("utf-8")))
        parts.append(_u32(arr.ndim))
        parts.extend(_u32(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | os.PathLike, model: FerModel, config: RunConfig,
                    state: SgdState | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, config, state, meta))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads version {VERSION})")
    try:
        config = parse_config(r.blob().decode("utf-8"), source="<checkpoint config>")
        meta = json.loads(r.blob().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None

    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.blob().decode("utf-8", errors="replace")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last record")

    model = FerModel.create(config.fer_config(), seed=config.seed)
    state_dict = {n.split(":", 1)[1]: v for n, v in tensors.items() if n.split(":", 1)[0] in ("param", "buffer")}
    try:
        model.load_state_dict(state_dict)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from None

    state = None
    if "sgd" in meta:
        s = meta["sgd"]
        state = SgdState(s["lr_backbone"], s["lr_heads"], s["momentum"], s["weight_decay"], s["decay_factor"],
                         epoch=s["epoch"])
        state.velocity = {n.split(":", 1)[1]: v for n, v in tensors.items() if n.startswith("velocity:")}
    return Checkpoint(config, model, state, meta)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
