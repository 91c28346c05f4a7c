"""Frozen backbone registry.

Image backbones consume (3, H, W) views and yield one pooled token vector;
univariate backbones embed each channel series independently. Without a local
checkpoint file, weights are seeded-random (the sandbox downloads nothing);
pass `checkpoint` to load real weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torchvision.models import VisionTransformer


@dataclass
class ImageBackboneSpec:
    input_size: int
    dim: int
    build: callable


@dataclass
class SeriesBackboneSpec:
    dim: int
    patch: int
    build: callable


def _vit_b_16() -> VisionTransformer:
    from torchvision.models import vit_b_16
    return vit_b_16(weights=None)


def _vit_tiny() -> VisionTransformer:
    return VisionTransformer(image_size=64, patch_size=16, num_layers=2,
                             num_heads=2, hidden_dim=64, mlp_dim=128)


class SeriesEncoder(nn.Module):
    """Patch-embed a 1-D series, add learned positions, transformer-encode."""

    def __init__(self, dim: int, patch: int, n_layers: int, n_heads: int, max_patches: int = 512):
        super().__init__()
        self.patch = patch
        self.embed = nn.Linear(patch, dim)
        self.pos = nn.Parameter(torch.zeros(max_patches, dim))
        nn.init.normal_(self.pos, std=0.02)
        layer = nn.TransformerEncoderLayer(d_model=dim, nhead=n_heads,
                                           dim_feedforward=4 * dim, batch_first=True,
                                           dropout=0.0)
        self.encoder = nn.TransformerEncoder(layer, num_layers=n_layers)

    def forward(self, series: torch.Tensor) -> torch.Tensor:
        """(B, L) -> (B, dim): mean over encoded patch positions."""
        B, L = series.shape
        n = L // self.patch
        if n < 1:
            raise ValueError(f"series length {L} shorter than patch {self.patch}")
        x = series[:, :n * self.patch].reshape(B, n, self.patch)
        h = self.embed(x) + self.pos[:n]
        return self.encoder(h).mean(dim=1)


IMAGE_MODELS: dict[str, ImageBackboneSpec] = {
    "vit_b_16": ImageBackboneSpec(input_size=224, dim=768, build=_vit_b_16),
    "vit_tiny": ImageBackboneSpec(input_size=64, dim=64, build=_vit_tiny),
}

SERIES_MODELS: dict[str, SeriesBackboneSpec] = {
    "ts_base": SeriesBackboneSpec(dim=256, patch=20,
                                  build=lambda: SeriesEncoder(256, 20, n_layers=4, n_heads=4)),
    "ts_tiny": SeriesBackboneSpec(dim=64, patch=20,
                                  build=lambda: SeriesEncoder(64, 20, n_layers=2, n_heads=2)),
}


def build_model(kind: str, name: str, seed: int, checkpoint: str | None = None):
    """Deterministically constructed (and optionally checkpoint-loaded) backbone."""
    if kind == "image":
        registry = IMAGE_MODELS
    elif kind == "univariate":
        registry = SERIES_MODELS
    else:
        raise ValueError(f"unknown teacher kind {kind!r}")
    if name not in registry:
        raise ValueError(f"unknown {kind} model {name!r} (have {sorted(registry)})")
    spec = registry[name]
    torch.manual_seed(seed)
    model = spec.build()
    if checkpoint:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, spec


class EncoderTokenTap:
    """Forward hook capturing a ViT encoder's token outputs (incl. class token)."""

    def __init__(self, vit: VisionTransformer):
        self.tokens = None
        vit.encoder.register_forward_hook(self._grab)

    def _grab(self, module, inputs, output):
        self.tokens = output
