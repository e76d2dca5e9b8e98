"""Binary checkpoint format with a trailing checksum.

Layout (little-endian throughout):

    magic "ACEL" | u32 version | block(config text) | block(rng json)
    | u64 step | u64 epoch | u32 tensor count | tensor records
    | u32 moment count | moment records | u64 adam step
    | 8-byte checksum (leading bytes of sha256 over everything before it)

A tensor record is: u32 name length | name utf-8 | u32 rank | u32 extents
| float64 values.  Round trips are byte-exact, so determinism checks can
compare files directly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, parse_model_train, render_model_train
from .model import ModelConfig

MAGIC = b"ACEL"
VERSION = 1
CHECKSUM_BYTES = 8


class CheckpointError(ValueError):
    """Raised for malformed, truncated, corrupted or mismatched files."""


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    tensors: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    rng_state: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0


def _pack_block(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    shape = np.asarray(arr).shape  # ascontiguousarray would promote 0-d to 1-d
    data = np.ascontiguousarray(arr, dtype="<f8")
    header = struct.pack("<I", len(raw)) + raw
    header += struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    return header + data.tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def block(self) -> bytes:
        return self.take(self.u32())

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.block().decode()
        rank = self.u32()
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return name, np.array(arr)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    body += _pack_block(render_model_train(ckpt.model_cfg, ckpt.train_cfg).encode())
    body += _pack_block(json.dumps(ckpt.rng_state, sort_keys=True).encode())
    body += struct.pack("<QQ", ckpt.step, ckpt.epoch)
    body += struct.pack("<I", len(ckpt.tensors))
    for name in sorted(ckpt.tensors):
        body += _pack_tensor(name, ckpt.tensors[name])
    moments = [("m", n, a) for n, a in sorted(ckpt.adam_m.items())]
    moments += [("v", n, a) for n, a in sorted(ckpt.adam_v.items())]
    body += struct.pack("<I", len(moments))
    for kind, name, arr in moments:
        body += _pack_tensor(f"adam.{kind}.{name}", arr)
    body += struct.pack("<Q", ckpt.adam_step)
    digest = hashlib.sha256(bytes(body)).digest()[:CHECKSUM_BYTES]
    Path(path).write_bytes(bytes(body) + digest)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 + CHECKSUM_BYTES:
        raise CheckpointError("checkpoint truncated")
    body, digest = data[:-CHECKSUM_BYTES], data[-CHECKSUM_BYTES:]
    if hashlib.sha256(body).digest()[:CHECKSUM_BYTES] != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    model_cfg, train_cfg = parse_model_train(r.block().decode())
    rng_state = json.loads(r.block().decode())
    step = r.u64()
    epoch = r.u64()
    tensors = dict(r.tensor() for _ in range(r.u32()))
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name, arr = r.tensor()
        _, kind, param = name.split(".", 2)
        (adam_m if kind == "m" else adam_v)[param] = arr
    adam_step = r.u64()
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(
        model_cfg=model_cfg, train_cfg=train_cfg, tensors=tensors,
        adam_m=adam_m, adam_v=adam_v, adam_step=adam_step,
        rng_state=rng_state, step=step, epoch=epoch,
    )
