"""Binary checkpoint container with a bit-exact round trip.

Layout (all integers little-endian):

    magic "ANCL" | u32 version | u32 tensor count
    per tensor:  u16 name length | name (UTF-8) | u8 rank | u32 x rank dims
                 | raw float32 little-endian values (row-major)
    u32 optimizer tensor count | optimizer tensors (same encoding)
    u32 metadata length | canonical JSON (sorted keys, no whitespace)

Tensor order is preserved, names are unique, and save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"ANCL"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_params: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = VERSION


def _write_tensors(out: list[bytes], tensors: dict[str, np.ndarray]) -> None:
    out.append(struct.pack("<I", len(tensors)))
    for name, values in tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name!r}")
        arr = np.ascontiguousarray(values, dtype="<f4")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _read_tensors(r: _Reader) -> dict[str, np.ndarray]:
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        rank = r.u8()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = data.copy()
    return tensors


def serialize(ckpt: Checkpoint) -> bytes:
    out: list[bytes] = [MAGIC, struct.pack("<I", ckpt.version)]
    _write_tensors(out, ckpt.params)
    _write_tensors(out, ckpt.opt_params)
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<I", len(meta)))
    out.append(meta)
    return b"".join(out)


def deserialize(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError("incompatible checkpoint: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"incompatible checkpoint: version {version}")
    params = _read_tensors(r)
    opt_params = _read_tensors(r)
    meta_len = r.u32()
    metadata = json.loads(r.take(meta_len).decode("utf-8")) if meta_len else {}
    if r.pos != len(r.blob):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(params=params, opt_params=opt_params, metadata=metadata, version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = serialize(ckpt)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def state_of(model) -> dict[str, np.ndarray]:
    """Named parameters plus buffers, in registry order."""
    state = {name: p.values for name, p in model.named_parameters()}
    for name, b in model.named_buffers():
        state[name] = b.values
    return state


def load_into(model, params: dict[str, np.ndarray]) -> None:
    """Strict load: every name must match, shapes included."""
    targets = dict(model.named_parameters())
    for name, b in model.named_buffers():
        targets[name] = b
    missing = sorted(set(targets) - set(params))
    unexpected = sorted(set(params) - set(targets))
    if missing or unexpected:
        raise CheckpointError(
            f"architecture mismatch: missing={missing} unexpected={unexpected}"
        )
    for name, tensor in targets.items():
        arr = params[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: file {arr.shape} vs model {tensor.shape}"
            )
        tensor.values = arr.astype(tensor.dtype)
