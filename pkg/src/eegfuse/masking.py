"""Binary masks over C x T segments: contiguous time-window or whole-channel.

Segment masking zeroes a 1-2 second window across all channels; channel
dropout zeroes one channel for every timestep. Exactly one mask is drawn per
sample per visit, at raw-sample resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import EegSegment
from .errors import ShapeError


class MaskKind(Enum):
    SEGMENT = "segment"
    CHANNEL_DROPOUT = "channel_dropout"


@dataclass(frozen=True)
class MaskSpec:
    kind: MaskKind
    start: int = 0       # segment mask: first zeroed column
    length: int = 0      # segment mask: zeroed columns
    channel: int = -1    # channel dropout: zeroed row


def sample_mask(C: int, T: int, fs: float, rng: np.random.Generator,
                segment_prob: float = 0.5) -> tuple[MaskSpec, np.ndarray]:
    """Draw one mask: segment window (length uniform in [fs, 2fs] samples,
    start uniform over valid positions) or a uniform channel dropout."""
    fs_n = int(round(fs))
    if T < 2 * fs_n:
        raise ValueError(f"segment too short to mask: T={T} < 2*fs={2 * fs_n}")
    mask = np.ones((C, T), dtype=np.float32)
    if rng.random() < segment_prob:
        length = int(rng.integers(fs_n, 2 * fs_n + 1))
        start = int(rng.integers(0, T - length + 1))
        mask[:, start:start + length] = 0.0
        return MaskSpec(MaskKind.SEGMENT, start=start, length=length), mask
    channel = int(rng.integers(0, C))
    mask[channel, :] = 0.0
    return MaskSpec(MaskKind.CHANNEL_DROPOUT, channel=channel), mask


def apply_mask(seg: EegSegment, mask: np.ndarray) -> EegSegment:
    """Elementwise product; masked entries become exactly 0."""
    if mask.shape != seg.data.shape:
        raise ShapeError("apply_mask", f"mask {mask.shape} vs segment {seg.data.shape}")
    return EegSegment(seg.data * mask.astype(seg.data.dtype), fs=seg.fs, normalized=seg.normalized)
