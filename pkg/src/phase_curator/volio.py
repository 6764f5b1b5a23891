"""Volume and stream file formats.

RVOL is the pipeline's binary volume container (little-endian):

    magic   4 bytes  b"RVOL"
    version u16      currently 1
    dtype   u16      0 = float32
    dims    3 * u32  D, H, W
    spacing 3 * f32  millimetres per voxel along D, H, W
    payload row-major voxel data

All line-oriented outputs are JSON-lines whose first record declares the
schema name and version, so files are self-describing and diffable.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
SCHEMA_PREFIX = "phase-curator"
SCHEMA_VERSION = 1


class VolumeFormatError(ValueError):
    """Corrupt or unsupported RVOL file."""


def write_rvol(path: str | Path, volume: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)) -> None:
    vol = np.ascontiguousarray(volume, dtype="<f4")
    if vol.ndim != 3:
        raise VolumeFormatError(f"RVOL stores [D,H,W] volumes, got shape {vol.shape}")
    header = RVOL_MAGIC + struct.pack(
        "<HH3I3f", RVOL_VERSION, 0, *vol.shape, *(float(s) for s in spacing_mm)
    )
    Path(path).write_bytes(header + vol.tobytes())


def read_rvol(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    raw = Path(path).read_bytes()
    head_len = 4 + struct.calcsize("<HH3I3f")
    if len(raw) < head_len or raw[:4] != RVOL_MAGIC:
        raise VolumeFormatError(f"{path} is not an RVOL file")
    version, dtype_code, d, h, w, sd, sh, sw = struct.unpack("<HH3I3f", raw[4:head_len])
    if version != RVOL_VERSION:
        raise VolumeFormatError(f"unsupported RVOL version {version}")
    if dtype_code != 0:
        raise VolumeFormatError(f"unsupported RVOL dtype code {dtype_code}")
    expected = head_len + 4 * d * h * w
    if len(raw) != expected:
        raise VolumeFormatError(f"{path} payload length {len(raw)} does not match dims {(d, h, w)}")
    vol = np.frombuffer(raw[head_len:], dtype="<f4").reshape(d, h, w).astype(np.float32)
    return vol, (sd, sh, sw)


class ManifestWriter:
    def __init__(self, path: str | Path, schema: str):
        self._fh = open(path, "w", encoding="utf-8", newline="\n")
        self._fh.write(
            json.dumps({"schema": f"{SCHEMA_PREFIX}/{schema}", "version": SCHEMA_VERSION}) + "\n"
        )

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "ManifestWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def open_manifest_writer(path: str | Path, schema: str) -> ManifestWriter:
    return ManifestWriter(path, schema)


def read_jsonl(path: str | Path, expect_schema: str | None = None) -> list[dict]:
    """All data records of a JSON-lines file, schema record validated."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            obj = json.loads(text)
            if lineno == 1 and isinstance(obj, dict) and "schema" in obj:
                if expect_schema is not None and obj["schema"] != f"{SCHEMA_PREFIX}/{expect_schema}":
                    raise ValueError(
                        f"{path}: expected schema {expect_schema!r}, found {obj['schema']!r}"
                    )
                continue
            records.append(obj)
    return records


def read_jsonl_lines(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()
