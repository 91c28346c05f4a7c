"""Wire formats shared with the trainer: export manifest in, rep cache out.

The cache layout (little-endian) is the trainer's documented interface:
magic "MTDP", version u32=1, teacher-name u16+utf8, d_k u32, n u32,
masked-flag u8, dtype u8 (0 = f32), then n records of (id u16+utf8,
d_k float32), trailing CRC32 of all preceding bytes.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib

import numpy as np

CACHE_MAGIC = b"MTDP"
CACHE_VERSION = 1


def read_manifest(export_dir: str) -> dict:
    path = os.path.join(export_dir, "manifest.json")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != "eegfuse-adapted-export":
        raise ValueError(f"{path}: not an adapted-input export manifest")
    if manifest.get("version") != 1:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')}")
    for key in ("adapter_kind", "teacher_name", "sample_ids", "sample_shape",
                "data_file", "cache_file", "masked"):
        if key not in manifest:
            raise ValueError(f"{path}: missing manifest key {key!r}")
    return manifest


def load_adapted(export_dir: str, manifest: dict) -> np.ndarray:
    data = np.load(os.path.join(export_dir, manifest["data_file"]))
    expected = (len(manifest["sample_ids"]), *manifest["sample_shape"])
    if data.shape != expected:
        raise ValueError(f"adapted data shape {data.shape} != manifest {expected}")
    return data.astype(np.float32)


def write_cache(path: str, teacher: str, masked: bool,
                records: list[tuple[str, np.ndarray]]) -> int:
    """Write records in order; returns the CRC32 stored in the trailer."""
    dims = {vec.shape for _, vec in records}
    if len(dims) != 1:
        raise ValueError(f"inconsistent rep dims: {sorted(dims)}")
    (dim,) = dims.pop()
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<I", CACHE_VERSION))
    name = teacher.encode("utf-8")
    buf.write(struct.pack("<H", len(name)))
    buf.write(name)
    buf.write(struct.pack("<II", dim, len(records)))
    buf.write(struct.pack("<BB", 1 if masked else 0, 0))
    for sid, vec in records:
        sid_b = sid.encode("utf-8")
        buf.write(struct.pack("<H", len(sid_b)))
        buf.write(sid_b)
        buf.write(np.asarray(vec, dtype="<f4").tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(payload + struct.pack("<I", crc))
    return crc
