"""Extraction jobs: adapted inputs -> pooled teacher vectors -> rep cache."""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .formats import load_adapted, read_manifest, write_cache
from .models import EncoderTokenTap, build_model

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ExtractJob:
    export_dir: str
    model: str = "vit_tiny"
    checkpoint: str | None = None
    pooling: str = "mean"          # image models: "mean" over patch tokens or "cls"
    resize_policy: str = "resize"  # image models: "resize" (bilinear) or "tile"
    normalize: bool = True         # image models: ImageNet channel stats
    out_dir: str | None = None
    seed: int = 0
    batch_size: int = 8

    def __post_init__(self):
        if self.pooling not in ("mean", "cls"):
            raise ValueError(f"pooling must be mean or cls, got {self.pooling!r}")
        if self.resize_policy not in ("resize", "tile"):
            raise ValueError(f"resize_policy must be resize or tile, got {self.resize_policy!r}")


def _fit_image(x: torch.Tensor, size: int, policy: str) -> torch.Tensor:
    """(B, 3, C, T) EEG view -> (B, 3, size, size)."""
    if policy == "resize":
        return F.interpolate(x, size=(size, size), mode="bilinear",
                             align_corners=False, antialias=False)
    reps_h = -(-size // x.shape[2])
    reps_w = -(-size // x.shape[3])
    tiled = x.repeat(1, 1, reps_h, reps_w)
    return tiled[:, :, :size, :size]


def _embed_images(model, spec, x: np.ndarray, job: ExtractJob) -> np.ndarray:
    tap = EncoderTokenTap(model)
    out = []
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    for lo in range(0, len(x), job.batch_size):
        batch = torch.from_numpy(x[lo:lo + job.batch_size])
        batch = _fit_image(batch, spec.input_size, job.resize_policy)
        if job.normalize:
            batch = (batch - mean) / std
        model(batch)
        tokens = tap.tokens            # (B, 1 + n_patches, dim)
        vec = tokens[:, 0] if job.pooling == "cls" else tokens[:, 1:].mean(dim=1)
        out.append(vec.numpy().astype(np.float32))
    return np.concatenate(out)


def _embed_series(model, spec, x: np.ndarray, job: ExtractJob) -> np.ndarray:
    """(N, C, T): embed channels independently, then mean across channels."""
    out = []
    for lo in range(0, len(x), job.batch_size):
        batch = torch.from_numpy(x[lo:lo + job.batch_size])
        B, C, T = batch.shape
        flat = batch.reshape(B * C, T)
        reps = model(flat).reshape(B, C, spec.dim)
        out.append(reps.mean(dim=1).numpy().astype(np.float32))
    return np.concatenate(out)


def run_extract(job: ExtractJob) -> dict:
    """Execute one job; writes the cache named by the manifest plus a job report."""
    manifest = read_manifest(job.export_dir)
    data = load_adapted(job.export_dir, manifest)
    kind = manifest["adapter_kind"]
    out_dir = job.out_dir or job.export_dir
    os.makedirs(out_dir, exist_ok=True)

    torch.set_num_threads(1)
    model, spec = build_model(kind, job.model, job.seed, job.checkpoint)

    caught: list[str] = []
    with warnings.catch_warnings(record=True) as wlist:
        warnings.simplefilter("always")
        torch.use_deterministic_algorithms(True, warn_only=True)
        with torch.no_grad():
            if kind == "image":
                vecs = _embed_images(model, spec, data, job)
            else:
                vecs = _embed_series(model, spec, data, job)
        caught = [str(w.message) for w in wlist if "deterministic" in str(w.message).lower()]

    if not np.all(np.isfinite(vecs)):
        raise ValueError("backbone produced non-finite representations")
    if vecs.shape != (len(manifest["sample_ids"]), spec.dim):
        raise ValueError(f"rep matrix {vecs.shape} != (n, {spec.dim})")

    cache_path = os.path.join(out_dir, manifest["cache_file"])
    crc = write_cache(cache_path, manifest["teacher_name"], manifest["masked"],
                      list(zip(manifest["sample_ids"], vecs)))

    report = {
        "model": job.model,
        "kind": kind,
        "dim": spec.dim,
        "n": len(vecs),
        "pooling": job.pooling if kind == "image" else "positions-mean-then-channel-mean",
        "resize_policy": job.resize_policy if kind == "image" else None,
        "checkpoint": job.checkpoint,
        "seed": job.seed,
        "cache_file": manifest["cache_file"],
        "crc32": crc,
        "nondeterministic_op_warnings": caught,
    }
    with open(os.path.join(out_dir, manifest["cache_file"] + ".report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report
