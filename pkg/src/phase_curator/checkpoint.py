"""Versioned binary checkpoint files.

Layout (all little-endian):

    magic   4 bytes  b"3DSE"
    version u16      currently 1
    hdrlen  u32      length of the UTF-8 JSON block
    header  bytes    {"config": {...}, "metadata": {...}}
    count   u16      number of tensor records
    record  u16 name length, name bytes, u8 rank, rank*u32 dims,
            float32 payload (row-major)

Round trips are bit-exact; loads refuse unknown versions, corrupt framing,
and tensors whose names or shapes are not derivable from the config.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ConfigError, ModelCheckpoint, ModelConfig, PARAM_ORDER
from .tensor import Tensor

MAGIC = b"3DSE"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or unreadable checkpoint file."""


def save(checkpoint: ModelCheckpoint, path: str | Path) -> None:
    missing = [name for name in PARAM_ORDER if name not in checkpoint.params]
    if missing:
        raise ConfigError(f"checkpoint is missing parameters: {missing}")
    header = json.dumps(
        {"config": checkpoint.config.to_dict(), "metadata": checkpoint.metadata},
        sort_keys=True,
    ).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    blob += struct.pack("<I", len(header))
    blob += header
    blob += struct.pack("<H", len(PARAM_ORDER))
    for name in PARAM_ORDER:
        tensor = checkpoint.params[name]
        payload = np.ascontiguousarray(tensor.data, dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", payload.ndim)
        blob += struct.pack(f"<{payload.ndim}I", *payload.shape)
        blob += payload.tobytes()
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint file")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path: str | Path) -> ModelCheckpoint:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}; not a checkpoint file")
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hdrlen,) = reader.unpack("<I")
    try:
        header = json.loads(reader.take(hdrlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    config = ModelConfig.from_dict(header.get("config", {}))
    metadata = header.get("metadata", {})
    expected = config.param_shapes()

    (count,) = reader.unpack("<H")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        if name not in expected:
            raise ConfigError(f"checkpoint tensor {name!r} is not part of the architecture")
        if tuple(dims) != expected[name]:
            raise ConfigError(
                f"checkpoint tensor {name!r} has shape {tuple(dims)}, config implies {expected[name]}"
            )
        n_values = int(np.prod(dims)) if dims else 1
        payload = reader.take(4 * n_values)
        data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True)
    if reader.pos != len(reader.raw):
        raise CheckpointError("trailing bytes after final tensor record")
    missing = [name for name in PARAM_ORDER if name not in params]
    if missing:
        raise ConfigError(f"checkpoint is missing parameters: {missing}")
    return ModelCheckpoint(config=config, params=params, metadata=metadata)
