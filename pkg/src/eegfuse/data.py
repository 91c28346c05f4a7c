"""EEG segment data model, preprocessing, synthetic datasets, and segment files.

Inputs are assumed already band-pass filtered and resampled; this module owns
the segment-level steps only: windowing, amplitude rejection, and unit
normalization. The on-disk `.eegseg` format is little-endian and bit-exact
under round-trip.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, TruncatedError, VersionError
from .rng import RngStreams

SEGMENT_MAGIC = b"EEGS"
SEGMENT_VERSION = 1
_FLAG_NORMALIZED = 1
_FLAG_LABELS = 2


@dataclass
class EegSegment:
    """One C x T window; values in microvolts until `normalized` is set."""

    data: np.ndarray
    fs: float
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"segment must be C x T with C,T >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("segment contains non-finite values")
        if self.normalized and np.abs(self.data).max() > 1.0 + 1e-6:
            raise ValueError("normalized segment has |value| > 1 + 1e-6")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def timesteps(self) -> int:
        return self.data.shape[1]


@dataclass
class SegmentStore:
    """Ordered segments sharing (C, T, fs), keyed by unique string ids."""

    segments: list[EegSegment]
    sample_ids: list[str]
    labels: list[int] | None = None

    def __post_init__(self):
        if len(self.segments) != len(self.sample_ids):
            raise ValueError("segments and sample_ids lengths differ")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("sample ids must be unique")
        if self.labels is not None and len(self.labels) != len(self.segments):
            raise ValueError("labels length differs from segments")
        if self.segments:
            c, t, fs = self.segments[0].channels, self.segments[0].timesteps, self.segments[0].fs
            for s in self.segments:
                if (s.channels, s.timesteps, s.fs) != (c, t, fs):
                    raise ValueError("all segments in a store must share (C, T, fs)")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def channels(self) -> int:
        return self.segments[0].channels

    @property
    def timesteps(self) -> int:
        return self.segments[0].timesteps

    @property
    def fs(self) -> float:
        return self.segments[0].fs

    @property
    def normalized(self) -> bool:
        return bool(self.segments) and self.segments[0].normalized

    def stacked(self) -> np.ndarray:
        """(N, C, T) float32 view of all segments."""
        return np.stack([s.data for s in self.segments])

    def index_of(self, sample_id: str) -> int:
        return self.sample_ids.index(sample_id)


@dataclass
class TaskSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    n_classes: int

    def __post_init__(self):
        ids = self.train + self.val + self.test
        if len(set(ids)) != len(ids):
            raise ValueError("an id appears in more than one split")


# -- preprocessing -------------------------------------------------------------


def segment_recording(raw: np.ndarray, fs: float, window_s: float = 30.0) -> list[EegSegment]:
    """Cut a C x N recording into floor(N / (window_s * fs)) contiguous windows."""
    raw = np.asarray(raw, dtype=np.float32)
    win = int(round(window_s * fs))
    n_seg = raw.shape[1] // win
    return [EegSegment(raw[:, i * win:(i + 1) * win].copy(), fs=fs) for i in range(n_seg)]


def reject_amplitude(seg: EegSegment, thresh_uv: float = 100.0) -> bool:
    """Keep a raw segment iff no sample strictly exceeds the threshold."""
    if seg.normalized:
        raise ValueError("amplitude rejection applies to raw (unnormalized) segments")
    return bool(np.abs(seg.data).max() <= thresh_uv)


def normalize_unit(seg: EegSegment, unit_uv: float = 100.0) -> EegSegment:
    """Scale microvolts into [-1, 1] by dividing by the unit amplitude."""
    if seg.normalized:
        raise ValueError("segment already normalized (double scaling)")
    return EegSegment(seg.data / unit_uv, fs=seg.fs, normalized=True)


def denormalize_unit(seg: EegSegment, unit_uv: float = 100.0) -> EegSegment:
    if not seg.normalized:
        raise ValueError("segment is not normalized")
    return EegSegment(seg.data * unit_uv, fs=seg.fs, normalized=False)


def normalize_store(store: SegmentStore, unit_uv: float = 100.0) -> SegmentStore:
    return SegmentStore(
        segments=[normalize_unit(s, unit_uv) for s in store.segments],
        sample_ids=list(store.sample_ids),
        labels=None if store.labels is None else list(store.labels),
    )


# -- synthetic data -------------------------------------------------------------


@dataclass
class SynthSpec:
    channels: int = 4
    timesteps: int = 400
    fs: float = 100.0
    n_samples: int = 400
    n_classes: int = 2
    snr: float = 1.0
    seed: int = 0
    signal_rms_uv: float = 20.0
    # per-sample variability (lognormal sigmas / harmonic-strength range);
    # gives band-power features genuine sample-level information content
    amp_jitter: float = 0.4
    noise_jitter: float = 0.4
    harmonic_range: tuple[float, float] = (0.2, 0.7)
    # per-sample per-channel gain spread (electrode-impedance-style); log
    # band powers shed it additively, raw waveforms entangle it
    channel_gain_jitter: float = 0.0
    # "frequency": one carrier per class; "topography": shared carrier,
    # classes distinguished by which channel carries it
    class_structure: str = "frequency"

    def __post_init__(self):
        if self.class_structure not in ("frequency", "topography"):
            raise ValueError(f"unknown class_structure {self.class_structure!r}")
        if self.class_structure == "topography" and self.n_classes > self.channels:
            raise ValueError("topography structure needs n_classes <= channels")


def class_frequencies(n_classes: int, fs: float) -> np.ndarray:
    """Distinct carrier per class, log-spaced below 0.8 * Nyquist."""
    f_lo, f_hi = 6.0, min(40.0, 0.8 * fs / 2.0)
    if n_classes == 1:
        return np.array([f_lo])
    return f_lo * (f_hi / f_lo) ** (np.arange(n_classes) / (n_classes - 1))


def synth_dataset(spec: SynthSpec) -> tuple[SegmentStore, TaskSplit]:
    """Plant one band-limited oscillation per class plus white noise at `snr`.

    Each class owns a carrier frequency (plus a second harmonic) and a fixed
    channel topography; per sample, phase, overall amplitude, harmonic
    strength, and noise level vary. Output is in microvolts, scaled so
    amplitude rejection at 100 uV virtually never fires.
    """
    if spec.n_classes < 2:
        raise ValueError("labeled synthetic data needs n_classes >= 2")
    rngs = RngStreams(spec.seed)
    C, T, n = spec.channels, spec.timesteps, spec.n_samples
    if spec.class_structure == "frequency":
        freqs = class_frequencies(spec.n_classes, spec.fs)
        topo_rng = rngs.stream("synth/topography")
        topos = 0.4 + 0.6 * topo_rng.random((spec.n_classes, C))
    else:
        # shared carrier; class c rides mostly on channel c
        freqs = np.full(spec.n_classes, class_frequencies(1, spec.fs)[0] + 4.0)
        topos = 0.2 + 0.8 * np.eye(C)[np.arange(spec.n_classes) % C]

    labels = np.arange(n) % spec.n_classes
    labels = labels[rngs.stream("synth/labels").permutation(n)]

    t = np.arange(T) / spec.fs
    sig_rng = rngs.stream("synth/signal")
    noise_rng = rngs.stream("synth/noise")
    base_noise_rms = spec.signal_rms_uv / np.sqrt(spec.snr) if np.isfinite(spec.snr) else 0.0

    segments, ids = [], []
    for i in range(n):
        c = int(labels[i])
        amp = spec.signal_rms_uv * np.exp(sig_rng.normal(0.0, spec.amp_jitter))
        h_strength = sig_rng.uniform(*spec.harmonic_range)
        noise_rms = base_noise_rms * np.exp(sig_rng.normal(0.0, spec.noise_jitter))
        carrier = np.sin(2 * np.pi * freqs[c] * t + sig_rng.uniform(0, 2 * np.pi))
        harmonic = h_strength * np.sin(2 * np.pi * 2 * freqs[c] * t + sig_rng.uniform(0, 2 * np.pi))
        wave = carrier + harmonic
        wave = wave / np.sqrt(np.mean(wave ** 2))
        sig = topos[c][:, None] * wave[None, :]
        sig = sig * (amp / np.sqrt(np.mean(sig ** 2)))
        noise = noise_rng.standard_normal((C, T)) * noise_rms
        x = sig + noise
        if spec.channel_gain_jitter > 0:
            gains = np.exp(sig_rng.normal(0.0, spec.channel_gain_jitter, size=C))
            x = x * gains[:, None]
        x = x.astype(np.float32)
        peak = np.abs(x).max()
        if peak > 99.5:  # keep every sample inside the 100 uV rejection bound
            x *= np.float32(99.5 / peak)
        segments.append(EegSegment(x, fs=spec.fs))
        ids.append(f"s{i:06d}")

    store = SegmentStore(segments=segments, sample_ids=ids, labels=[int(v) for v in labels])
    split = stratified_split(ids, [int(v) for v in labels], spec.n_classes,
                             rngs.stream("synth/split"))
    return store, split


def stratified_split(ids: list[str], labels: list[int], n_classes: int,
                     rng: np.random.Generator,
                     fractions: tuple[float, float] = (0.6, 0.2)) -> TaskSplit:
    """Per-class shuffle into train/val/test at the given fractions."""
    train, val, test = [], [], []
    by_class: dict[int, list[str]] = {}
    for sid, y in zip(ids, labels):
        by_class.setdefault(y, []).append(sid)
    for y in sorted(by_class):
        members = list(by_class[y])
        perm = rng.permutation(len(members))
        members = [members[int(p)] for p in perm]
        n_tr = max(1, int(round(fractions[0] * len(members))))
        n_va = max(1, int(round(fractions[1] * len(members))))
        train += members[:n_tr]
        val += members[n_tr:n_tr + n_va]
        test += members[n_tr + n_va:]
    return TaskSplit(train=train, val=val, test=test, n_classes=n_classes)


# -- .eegseg binary format ------------------------------------------------------


def write_segments(store: SegmentStore, path: str) -> None:
    buf = io.BytesIO()
    flags = (_FLAG_NORMALIZED if store.normalized else 0) | (_FLAG_LABELS if store.labels is not None else 0)
    buf.write(SEGMENT_MAGIC)
    buf.write(struct.pack("<IIIfII", SEGMENT_VERSION, store.channels, store.timesteps,
                          store.fs, flags, len(store)))
    for i, (sid, seg) in enumerate(zip(store.sample_ids, store.segments)):
        sid_b = sid.encode("utf-8")
        buf.write(struct.pack("<H", len(sid_b)))
        buf.write(sid_b)
        if store.labels is not None:
            buf.write(struct.pack("<H", store.labels[i]))
        buf.write(seg.data.astype("<f4").tobytes(order="C"))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_segments(path: str) -> SegmentStore:
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedError(path, expected=pos + n, actual=len(blob))
        out = blob[pos:pos + n]
        pos += n
        return out

    magic = take(4, "magic")
    if magic != SEGMENT_MAGIC:
        raise BadMagicError(path, SEGMENT_MAGIC, magic)
    version, C, T, fs, flags, n = struct.unpack("<IIIfII", take(24, "header"))
    if version != SEGMENT_VERSION:
        raise VersionError(path, SEGMENT_VERSION, version)
    normalized = bool(flags & _FLAG_NORMALIZED)
    has_labels = bool(flags & _FLAG_LABELS)

    segments, ids = [], []
    labels: list[int] | None = [] if has_labels else None
    for _ in range(n):
        (id_len,) = struct.unpack("<H", take(2, "id length"))
        ids.append(take(id_len, "id").decode("utf-8"))
        if has_labels:
            labels.append(struct.unpack("<H", take(2, "label"))[0])
        raw = take(C * T * 4, "payload")
        data = np.frombuffer(raw, dtype="<f4").reshape(C, T).copy()
        segments.append(EegSegment(data, fs=fs, normalized=normalized))
    if pos != len(blob):
        raise TruncatedError(path, expected=pos, actual=len(blob))
    return SegmentStore(segments=segments, sample_ids=ids, labels=labels)
