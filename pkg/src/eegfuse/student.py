"""Compact EEG encoder: time/frequency patch encoders, convolutional
positional encoder, and a criss-cross transformer splitting attention heads
between the channel axis and the patch axis.

The reference scale (C=16, T=6000, P=200, d=200, 12 layers, 8 heads, ffn 800)
lands near 4M parameters; the desk default (C=4, T=400, P=40, d=64, 4 layers,
4 heads, ffn 256) trains in seconds. Conv hyperparameters scale with P so the
first stride is always P/8 and each patch yields exactly 8 conv positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import STUDENT_MAGIC, read_checkpoint, write_checkpoint
from .nn import Conv1d, DepthwiseConv2d, LayerNorm, Linear, Module
from .optim import kaiming_init
from .rng import RngStreams

_CONV_POSITIONS = 8  # conv positions per patch; width * 8 == d_model


def _largest_odd_leq(n: int) -> int:
    return n if n % 2 == 1 else n - 1


def default_pos_kernel(C: int, n_patches: int) -> tuple[int, int]:
    """Largest odd kernel fitting the grid, capped at the reference (19, 7)."""
    return (min(19, _largest_odd_leq(C)), min(7, _largest_odd_leq(n_patches)))


@dataclass
class StudentConfig:
    channels: int = 4
    timesteps: int = 400
    patch_len: int = 40
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    spatial_heads: int = 2
    temporal_heads: int = 2
    ffn_dim: int = 256
    dropout: float = 0.0
    pos_kernel: tuple[int, int] | None = None

    def __post_init__(self):
        problems = []
        if self.timesteps % self.patch_len != 0:
            problems.append(f"T={self.timesteps} not divisible by patch_len={self.patch_len}")
        if self.patch_len % _CONV_POSITIONS != 0:
            problems.append(f"patch_len={self.patch_len} not divisible by {_CONV_POSITIONS}")
        if self.spatial_heads + self.temporal_heads != self.n_heads:
            problems.append("spatial_heads + temporal_heads != n_heads")
        if self.d_model % self.n_heads != 0:
            problems.append(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % _CONV_POSITIONS != 0:
            problems.append(f"d_model={self.d_model} not divisible by {_CONV_POSITIONS}")
        if problems:
            raise ValueError("; ".join(problems))
        if self.pos_kernel is None:
            self.pos_kernel = default_pos_kernel(self.channels, self.n_patches)

    @property
    def n_patches(self) -> int:
        return self.timesteps // self.patch_len

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "channels": self.channels, "timesteps": self.timesteps,
            "patch_len": self.patch_len, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "spatial_heads": self.spatial_heads, "temporal_heads": self.temporal_heads,
            "ffn_dim": self.ffn_dim, "dropout": float(self.dropout),
            "pos_kernel_c": self.pos_kernel[0], "pos_kernel_p": self.pos_kernel[1],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudentConfig":
        return cls(channels=int(d["channels"]), timesteps=int(d["timesteps"]),
                   patch_len=int(d["patch_len"]), d_model=int(d["d_model"]),
                   n_layers=int(d["n_layers"]), n_heads=int(d["n_heads"]),
                   spatial_heads=int(d["spatial_heads"]), temporal_heads=int(d["temporal_heads"]),
                   ffn_dim=int(d["ffn_dim"]), dropout=float(d["dropout"]),
                   pos_kernel=(int(d["pos_kernel_c"]), int(d["pos_kernel_p"])))


def paper_scale_config() -> StudentConfig:
    return StudentConfig(channels=16, timesteps=6000, patch_len=200, d_model=200,
                         n_layers=12, n_heads=8, spatial_heads=4, temporal_heads=4,
                         ffn_dim=800, pos_kernel=(19, 7))


class TimePatchEncoder(Module):
    """Per-channel conv stack over each patch; widths scale with d_model."""

    def __init__(self, cfg: StudentConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        width = cfg.d_model // _CONV_POSITIONS
        stride = cfg.patch_len // _CONV_POSITIONS
        self.conv1 = self.add_child("conv1", Conv1d(1, width, 2 * stride - 1, stride, stride - 1, rng, dtype))
        self.conv2 = self.add_child("conv2", Conv1d(width, width, 3, 1, 1, rng, dtype))
        self.conv3 = self.add_child("conv3", Conv1d(width, width, 3, 1, 1, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        B, C, T = x.shape
        cfg = self.cfg
        patches = ad.reshape(x, (B * C * cfg.n_patches, 1, cfg.patch_len))
        h = self.conv1(patches)
        h = ad.gelu(h)
        h = self.conv2(h)
        h = ad.gelu(h)
        h = self.conv3(h)                       # (B*C*Np, width, 8)
        h = ad.reshape(h, (B, C, cfg.n_patches, cfg.d_model))
        return h


class FreqPatchEncoder(Module):
    """rfft magnitudes per patch -> linear projection to d_model."""

    def __init__(self, cfg: StudentConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.n_bins = cfg.patch_len // 2 + 1
        self.proj = self.add_child("proj", Linear(self.n_bins, cfg.d_model, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        B, C, T = x.shape
        cfg = self.cfg
        patches = x.data.reshape(B, C, cfg.n_patches, cfg.patch_len)
        mags = ad.rfft_magnitude(patches)       # raw signal in, constant w.r.t. tape
        return self.proj(Tensor(mags.astype(x.dtype)))


class PositionalEncoder(Module):
    """Depthwise 2-D conv over the (channel, patch) grid, added residually."""

    def __init__(self, cfg: StudentConfig, rng, dtype=np.float32):
        super().__init__()
        self.conv = self.add_child("conv", DepthwiseConv2d(cfg.d_model, cfg.pos_kernel, rng, dtype))

    def __call__(self, grid: Tensor) -> Tensor:
        x = ad.transpose(grid, (0, 3, 1, 2))    # (B, d, C, Np)
        y = self.conv(x)
        return ad.add(grid, ad.transpose(y, (0, 2, 3, 1)))


class CrissCrossBlock(Module):
    """Pre-LN block: half the heads attend along channels (per patch index),
    half along patches (per channel); head outputs are concatenated, then a
    feed-forward sublayer. Each head projects q/k/v from its own d_model/n_heads
    feature slice (keeps the reference-scale parameter count near 4M).

    Heads within a branch are batched: q/k/v weights live in (n_branch_heads,
    dh, dh) tensors applied with one broadcast matmul per branch."""

    def __init__(self, cfg: StudentConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        dh = cfg.head_dim
        self.ln1 = self.add_child("ln1", LayerNorm(cfg.d_model, dtype))
        self.ln2 = self.add_child("ln2", LayerNorm(cfg.d_model, dtype))
        for branch, n in (("s", cfg.spatial_heads), ("t", cfg.temporal_heads)):
            for proj in ("q", "k", "v"):
                self.register(f"w{proj}_{branch}", Tensor(
                    kaiming_init((n, dh, dh), dh, rng, dtype), requires_grad=True))
                self.register(f"b{proj}_{branch}", Tensor(
                    np.zeros((n, dh), dtype=dtype), requires_grad=True))
        self.ffn1 = self.add_child("ffn1", Linear(cfg.d_model, cfg.ffn_dim, rng, dtype))
        self.ffn2 = self.add_child("ffn2", Linear(cfg.ffn_dim, cfg.d_model, rng, dtype))

    def _branch(self, tokens: Tensor, branch: str, n: int) -> Tensor:
        """tokens: (n, B, *, L, dh); attention over L per head with per-head
        projections; returns the same shape."""
        dh = self.cfg.head_dim
        lead = (n,) + (1,) * (len(tokens.shape) - 3)
        outs = {}
        for proj in ("q", "k", "v"):
            w = ad.reshape(self._params[f"w{proj}_{branch}"], lead + (dh, dh))
            b = ad.reshape(self._params[f"b{proj}_{branch}"], lead + (1, dh))
            outs[proj] = ad.add(ad.matmul(tokens, w), b)
        att, _ = ad.scaled_dot_product_attention(outs["q"], outs["k"], outs["v"])
        return att

    def __call__(self, grid: Tensor, rng=None, training: bool = False) -> Tensor:
        cfg = self.cfg
        dh = cfg.head_dim
        B, C, Np, d = grid.shape
        S, T = cfg.spatial_heads, cfg.temporal_heads
        a = self.ln1(grid)

        # spatial heads: slices [0, S*dh), attention along the channel axis
        xs = a[..., :S * dh]
        xs = ad.transpose(ad.reshape(xs, (B, C, Np, S, dh)), (3, 0, 2, 1, 4))  # (S,B,Np,C,dh)
        ys = self._branch(xs, "s", S)
        ys = ad.reshape(ad.transpose(ys, (1, 3, 2, 0, 4)), (B, C, Np, S * dh))

        # temporal heads: slices [S*dh, d), attention along the patch axis
        xt = a[..., S * dh:]
        xt = ad.transpose(ad.reshape(xt, (B, C, Np, T, dh)), (3, 0, 1, 2, 4))  # (T,B,C,Np,dh)
        yt = self._branch(xt, "t", T)
        yt = ad.reshape(ad.transpose(yt, (1, 2, 3, 0, 4)), (B, C, Np, T * dh))

        att = ad.concat([ys, yt], axis=-1)
        if training and cfg.dropout > 0:
            att = ad.dropout(att, cfg.dropout, rng, training)
        h = ad.add(grid, att)
        f = self.ffn2(ad.gelu(self.ffn1(self.ln2(h))))
        if training and cfg.dropout > 0:
            f = ad.dropout(f, cfg.dropout, rng, training)
        return ad.add(h, f)


class StudentEncoder(Module):
    """Full encoder: (B, C, T) -> token grid (B, C, Np, d) -> pooled (B, d)."""

    def __init__(self, cfg: StudentConfig, rngs: RngStreams, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        self.time_enc = self.add_child("time_enc", TimePatchEncoder(cfg, rngs.stream("init/time_enc"), dtype))
        self.freq_enc = self.add_child("freq_enc", FreqPatchEncoder(cfg, rngs.stream("init/freq_enc"), dtype))
        self.pos_enc = self.add_child("pos_enc", PositionalEncoder(cfg, rngs.stream("init/pos_enc"), dtype))
        self.blocks = [
            self.add_child(f"block{i}", CrissCrossBlock(cfg, rngs.stream(f"init/block{i}"), dtype))
            for i in range(cfg.n_layers)
        ]

    def encode(self, x: Tensor, rng=None, training: bool = False) -> Tensor:
        if x.shape[1:] != (self.cfg.channels, self.cfg.timesteps):
            raise ValueError(f"expected (B, {self.cfg.channels}, {self.cfg.timesteps}), got {x.shape}")
        grid = ad.add(self.time_enc(x), self.freq_enc(x))
        grid = self.pos_enc(grid)
        for block in self.blocks:
            grid = block(grid, rng=rng, training=training)
        return grid

    @staticmethod
    def pool(grid: Tensor) -> Tensor:
        return ad.mean(grid, axis=(1, 2))

    def __call__(self, x: Tensor, rng=None, training: bool = False) -> Tensor:
        return self.pool(self.encode(x, rng=rng, training=training))

    def features(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Deterministic pooled features for an (N, C, T) array; no tape."""
        outs = []
        for i in range(0, len(x), batch_size):
            chunk = Tensor(x[i:i + batch_size].astype(self.dtype))
            outs.append(self(chunk).data)
        return np.concatenate(outs, axis=0)

    def token_grids(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        outs = []
        for i in range(0, len(x), batch_size):
            chunk = Tensor(x[i:i + batch_size].astype(self.dtype))
            outs.append(self.encode(chunk).data)
        return np.concatenate(outs, axis=0)

    # -- persistence ----------------------------------------------------------

    def save(self, path: str) -> bytes:
        return write_checkpoint(path, STUDENT_MAGIC, self.cfg.to_dict(), self.state())

    @classmethod
    def load(cls, path: str, dtype=np.float32) -> "StudentEncoder":
        config, params = read_checkpoint(path, STUDENT_MAGIC)
        enc = cls(StudentConfig.from_dict(config), RngStreams(0), dtype)
        enc.load_state(params)
        return enc
