"""Binary checkpoint container shared by student ("MTDW") and gate ("MTDG").

Layout (little-endian): magic (4), version u32, config block (count u16, then
per entry: name u16+utf8, type u8 (0=u32, 1=f32), 4-byte value), parameter
table (count u32, then per entry: name u16+utf8, rank u8, extents u32...,
f32 payload), trailing CRC32 of all preceding bytes.
"""

from __future__ import annotations

import io
import struct
import zlib

import numpy as np

from .errors import BadMagicError, ChecksumError, TruncatedError, VersionError

STUDENT_MAGIC = b"MTDW"
GATE_MAGIC = b"MTDG"
CHECKPOINT_VERSION = 1


def write_checkpoint(path: str, magic: bytes, config: dict[str, int | float],
                     params: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<H", len(config)))
    for name, value in config.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        if isinstance(value, bool) or isinstance(value, (int, np.integer)):
            buf.write(struct.pack("<BI", 0, int(value)))
        else:
            buf.write(struct.pack("<Bf", 1, float(value)))
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for ext in arr.shape:
            buf.write(struct.pack("<I", ext))
        buf.write(arr.astype("<f4").tobytes(order="C"))
    payload = buf.getvalue()
    blob = payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def read_checkpoint(path: str, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise TruncatedError(path, expected=4, actual=len(blob))
    payload, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != stored_crc:
        raise ChecksumError(path, expected=stored_crc, got=crc)

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(payload):
            raise TruncatedError(path, expected=pos + n + 4, actual=len(blob))
        out = payload[pos:pos + n]
        pos += n
        return out

    got_magic = take(4)
    if got_magic != magic:
        raise BadMagicError(path, magic, got_magic)
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise VersionError(path, CHECKPOINT_VERSION, version)

    (n_cfg,) = struct.unpack("<H", take(2))
    config: dict[str, int | float] = {}
    for _ in range(n_cfg):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (tcode,) = struct.unpack("<B", take(1))
        if tcode == 0:
            config[name] = struct.unpack("<I", take(4))[0]
        else:
            config[name] = struct.unpack("<f", take(4))[0]

    (n_params,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(take(count * 4), dtype="<f4").reshape(shape).copy()
    if pos != len(payload):
        raise TruncatedError(path, expected=pos + 4, actual=len(blob))
    return config, params
