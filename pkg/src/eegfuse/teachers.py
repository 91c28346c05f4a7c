"""Frozen teacher adapters, mock desk-scale teachers, and the rep cache.

Teachers are deterministic maps from a segment to a fixed-width vector.
Representations are precomputed once per (sample, masked-flag) and stored in
`.mtdpcache` files (CRC-guarded), so training never re-runs a teacher. The
mask for a sample is drawn from a stream keyed by (mask_seed, sample_id) and
is therefore shared by every teacher that embeds that sample.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .data import EegSegment, SegmentStore
from .errors import (BadMagicError, ChecksumError, DimensionMismatchError,
                     TruncatedError, VersionError)
from .masking import apply_mask, sample_mask
from .rng import stream

CACHE_MAGIC = b"MTDP"
CACHE_VERSION = 1

DEFAULT_BANDS = ((1.0, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 45.0))
ALT_BANDS = ((2.0, 6.0), (6.0, 10.0), (10.0, 16.0), (16.0, 24.0), (24.0, 34.0), (34.0, 45.0))


# -- input adapters -------------------------------------------------------------


def image_view_adapt(seg: EegSegment) -> np.ndarray:
    """Min-max scale the whole segment to [0, 1] and replicate over 3 planes.

    A constant segment maps to 0.5 everywhere (degenerate min == max rule).
    """
    x = seg.data
    lo, hi = float(x.min()), float(x.max())
    if hi - lo == 0.0:
        plane = np.full_like(x, 0.5)
    else:
        plane = (x - lo) / (hi - lo)
    return np.repeat(plane[None, :, :], 3, axis=0)


def univariate_views(seg: EegSegment) -> list[np.ndarray]:
    """Per-channel series, processed independently by univariate teachers."""
    return [seg.data[c].copy() for c in range(seg.channels)]


def mean_pool_channels(reps: list[np.ndarray]) -> np.ndarray:
    if not reps:
        raise ValueError("cannot pool an empty rep list")
    dims = {r.shape for r in reps}
    if len(dims) != 1:
        raise ValueError(f"per-channel reps disagree on dimension: {sorted(dims)}")
    return np.mean(np.stack(reps), axis=0)


# -- teacher adapters -----------------------------------------------------------


class TeacherAdapter:
    """Deterministic map EegSegment -> R^dim; frozen by definition."""

    name: str
    dim: int

    def embed(self, seg: EegSegment, sample_id: str = "") -> np.ndarray:
        raise NotImplementedError


def band_log_powers(seg: EegSegment, bands=DEFAULT_BANDS, floor: float = 1.0) -> np.ndarray:
    """(C * n_bands,) log mean power per channel per band."""
    nyquist = seg.fs / 2.0
    for lo, hi in bands:
        if hi > nyquist:
            raise ValueError(f"band ({lo}, {hi}) exceeds Nyquist {nyquist}")
    spec = np.abs(np.fft.rfft(seg.data.astype(np.float64), axis=-1)) ** 2
    freqs = np.fft.rfftfreq(seg.timesteps, 1.0 / seg.fs)
    feats = []
    for lo, hi in bands:
        sel = (freqs >= lo) & (freqs < hi)
        feats.append(np.log(spec[:, sel].mean(axis=-1) + floor))
    return np.stack(feats, axis=1).reshape(-1)


class SpectralTeacher(TeacherAdapter):
    """Log band powers per channel, projected to `dim` by a fixed seeded matrix."""

    def __init__(self, channels: int, fs: float, dim: int = 32,
                 bands=DEFAULT_BANDS, seed: int = 0, name: str = "spectral",
                 floor: float = 1.0):
        nyquist = fs / 2.0
        for lo, hi in bands:
            if hi > nyquist:
                raise ValueError(f"band ({lo}, {hi}) exceeds Nyquist {nyquist}")
        self.name = name
        self.dim = dim
        self.bands = tuple(bands)
        self.fs = fs
        self.floor = floor
        n_feat = channels * len(self.bands)
        rng = stream(seed, f"teacher/{name}/projection")
        self.projection = (rng.standard_normal((n_feat, dim)) / np.sqrt(n_feat)).astype(np.float64)

    def embed(self, seg: EegSegment, sample_id: str = "") -> np.ndarray:
        feats = band_log_powers(seg, self.bands, self.floor)
        return (feats @ self.projection).astype(np.float32)


class NoiseTeacher(TeacherAdapter):
    """Id-keyed hash vector: invariant to the signal, so it carries nothing
    denoisable about the input. Control teacher for gate-weight experiments."""

    def __init__(self, dim: int = 32, seed: int = 0, name: str = "noise"):
        self.name = name
        self.dim = dim
        self.seed = seed

    def embed(self, seg: EegSegment, sample_id: str = "") -> np.ndarray:
        rng = stream(self.seed, f"teacher/{self.name}/id/{sample_id}")
        return rng.standard_normal(self.dim).astype(np.float32)


class AlignedTeacher(TeacherAdapter):
    """Wrap a teacher with a fixed seeded linear map dim -> fuse_dim."""

    def __init__(self, inner: TeacherAdapter, fuse_dim: int, seed: int = 0):
        self.inner = inner
        self.name = inner.name
        self.dim = fuse_dim
        rng = stream(seed, f"aligner/{inner.name}/{inner.dim}->{fuse_dim}")
        self.matrix = (rng.standard_normal((inner.dim, fuse_dim)) / np.sqrt(inner.dim)).astype(np.float32)

    def embed(self, seg: EegSegment, sample_id: str = "") -> np.ndarray:
        return (self.inner.embed(seg, sample_id) @ self.matrix).astype(np.float32)


def make_teacher(kind: str, channels: int, fs: float, dim: int, seed: int) -> TeacherAdapter:
    """Registry for the desk-scale mock teachers.

    'spectral' and 'spectral_alt' are complementary informative teachers
    (different band partitions and projections); 'noise' is the id-keyed
    control used by the gate-weight dominance experiment.
    """
    if kind == "spectral":
        return SpectralTeacher(channels, fs, dim=dim, seed=seed, name="spectral")
    if kind == "spectral_alt":
        return SpectralTeacher(channels, fs, dim=dim, seed=seed, name="spectral_alt",
                               bands=ALT_BANDS)
    if kind == "noise":
        return NoiseTeacher(dim=dim, seed=seed, name="noise")
    raise ValueError(f"unknown teacher kind {kind!r} (expected spectral, spectral_alt, noise)")


# -- rep cache -------------------------------------------------------------------


@dataclass
class TeacherRep:
    teacher: str
    sample_id: str
    masked: bool
    vec: np.ndarray


@dataclass
class RepCache:
    """Ordered (sample_id -> vector) map for one teacher and one masked-flag."""

    teacher: str
    dim: int
    masked: bool
    vectors: dict[str, np.ndarray]

    def __post_init__(self):
        for sid, v in self.vectors.items():
            if v.shape != (self.dim,):
                raise ValueError(f"{self.teacher}/{sid}: vector shape {v.shape} != ({self.dim},)")

    def __len__(self):
        return len(self.vectors)

    def matrix(self, sample_ids: list[str]) -> np.ndarray:
        return np.stack([self.vectors[sid] for sid in sample_ids])


def precompute_reps(store: SegmentStore, teacher: TeacherAdapter,
                    mask_seed: int | None = None,
                    segment_prob: float = 0.5) -> tuple[RepCache, RepCache]:
    """(unmasked, masked) caches for every sample in the store.

    The mask stream is keyed by (mask_seed, sample_id), so repeated calls and
    different teachers see the same mask draw for each sample. mask_seed=None
    uses the identity mask (masked cache equals unmasked cache).
    """
    if len(store) == 0:
        raise ValueError("store is empty")
    clean: dict[str, np.ndarray] = {}
    masked: dict[str, np.ndarray] = {}
    for sid, seg in zip(store.sample_ids, store.segments):
        vec = np.asarray(teacher.embed(seg, sid), dtype=np.float32)
        if vec.shape != (teacher.dim,):
            raise ValueError(f"{teacher.name}: dim drift on {sid}: {vec.shape} != ({teacher.dim},)")
        clean[sid] = vec
        if mask_seed is None:
            masked[sid] = vec.copy()
        else:
            rng = stream(mask_seed, f"mask/{sid}")
            _, m = sample_mask(seg.channels, seg.timesteps, seg.fs, rng, segment_prob)
            masked[sid] = np.asarray(teacher.embed(apply_mask(seg, m), sid), dtype=np.float32)
    return (RepCache(teacher.name, teacher.dim, False, clean),
            RepCache(teacher.name, teacher.dim, True, masked))


def cache_write(cache: RepCache, path: str) -> None:
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<I", CACHE_VERSION))
    name_b = cache.teacher.encode("utf-8")
    buf.write(struct.pack("<H", len(name_b)))
    buf.write(name_b)
    buf.write(struct.pack("<II", cache.dim, len(cache.vectors)))
    buf.write(struct.pack("<BB", 1 if cache.masked else 0, 0))
    for sid, vec in cache.vectors.items():
        sid_b = sid.encode("utf-8")
        buf.write(struct.pack("<H", len(sid_b)))
        buf.write(sid_b)
        buf.write(vec.astype("<f4").tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(payload + struct.pack("<I", crc))


def cache_read(path: str) -> RepCache:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise TruncatedError(path, expected=4, actual=len(blob))
    payload, tail = blob[:-4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", tail)
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

    magic = take(4)
    if magic != CACHE_MAGIC:
        raise BadMagicError(path, CACHE_MAGIC, magic)
    (version,) = struct.unpack("<I", take(4))
    if version != CACHE_VERSION:
        raise VersionError(path, CACHE_VERSION, version)
    (name_len,) = struct.unpack("<H", take(2))
    teacher = take(name_len).decode("utf-8")
    dim, n = struct.unpack("<II", take(8))
    masked_flag, dtype_code = struct.unpack("<BB", take(2))
    if dtype_code != 0:
        raise VersionError(path, 0, dtype_code)
    vectors: dict[str, np.ndarray] = {}
    for i in range(n):
        (sid_len,) = struct.unpack("<H", take(2))
        sid = take(sid_len).decode("utf-8")
        # CRC already validated: a record shortfall here means the d_k header
        # disagrees with the payload the writer produced, not file damage.
        if pos + dim * 4 > len(payload):
            raise DimensionMismatchError(
                path, f"record {i} ({sid}) needs {dim * 4} vector bytes, {len(payload) - pos} remain")
        vectors[sid] = np.frombuffer(take(dim * 4), dtype="<f4").copy()
    if pos != len(payload):
        raise DimensionMismatchError(
            path, f"{len(payload) - pos} trailing payload bytes given d_k={dim}, n={n}")
    return RepCache(teacher=teacher, dim=dim, masked=bool(masked_flag), vectors=vectors)


# -- adapted-input export (bridge to the external extractor) ---------------------


def export_adapted_inputs(store: SegmentStore, adapter_kind: str, out_dir: str,
                          teacher_name: str | None = None,
                          mask_seed: int | None = None,
                          segment_prob: float = 0.5) -> dict:
    """Write adapted tensors plus the manifest an external extractor consumes.

    adapter_kind 'image' emits (3, C, T) min-max views; 'univariate' emits
    (C, T) per-channel series. With mask_seed set, segments are masked first
    (same per-sample draw the mock-teacher pipeline uses) and the manifest
    names the masked cache file the extractor must produce.
    """
    if adapter_kind not in ("image", "univariate"):
        raise ValueError(f"unknown adapter kind {adapter_kind!r}")
    if len(store) == 0:
        raise ValueError("store is empty")
    os.makedirs(out_dir, exist_ok=True)
    teacher_name = teacher_name or f"{adapter_kind}-teacher"
    masked = mask_seed is not None

    arrays = []
    for sid, seg in zip(store.sample_ids, store.segments):
        if masked:
            rng = stream(mask_seed, f"mask/{sid}")
            _, m = sample_mask(seg.channels, seg.timesteps, seg.fs, rng, segment_prob)
            seg = apply_mask(seg, m)
        if adapter_kind == "image":
            arrays.append(image_view_adapt(seg))
        else:
            arrays.append(np.stack(univariate_views(seg)))
    data = np.stack(arrays).astype(np.float32)
    data_file = "adapted.npy"
    np.save(os.path.join(out_dir, data_file), data)

    suffix = "masked" if masked else "clean"
    manifest = {
        "format": "eegfuse-adapted-export",
        "version": 1,
        "adapter_kind": adapter_kind,
        "teacher_name": teacher_name,
        "masked": masked,
        "sample_ids": list(store.sample_ids),
        "sample_shape": list(data.shape[1:]),
        "fs": float(store.fs),
        "data_file": data_file,
        "cache_file": f"{teacher_name}-{suffix}.mtdpcache",
        "adapter_params": {
            "image": {"scaling": "minmax-0-1", "planes": 3, "degenerate_fill": 0.5},
            "univariate": {"channel_policy": "independent-then-mean"},
        }[adapter_kind],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def read_manifest(out_dir: str) -> dict:
    with open(os.path.join(out_dir, "manifest.json")) as f:
        return json.load(f)
