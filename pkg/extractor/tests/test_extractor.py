"""Extractor format conformance, determinism, and trainer interoperability."""

import json
import os
import zlib

import numpy as np
import pytest

from repextract.cli import main
from repextract.extract import ExtractJob, run_extract
from repextract.formats import read_manifest, write_cache
from repextract.models import IMAGE_MODELS, SERIES_MODELS, build_model

eegfuse_data = pytest.importorskip("eegfuse.data")
eegfuse_teachers = pytest.importorskip("eegfuse.teachers")


@pytest.fixture(scope="module")
def export32(tmp_path_factory):
    """32-sample image + univariate exports produced by the trainer."""
    raw, _ = eegfuse_data.synth_dataset(eegfuse_data.SynthSpec(n_samples=32, seed=3))
    store = eegfuse_data.normalize_store(raw)
    base = tmp_path_factory.mktemp("exports")
    img = str(base / "image")
    uni = str(base / "univariate")
    eegfuse_teachers.export_adapted_inputs(store, "image", img, teacher_name="vision")
    eegfuse_teachers.export_adapted_inputs(store, "univariate", uni, teacher_name="series",
                                           mask_seed=9)
    return img, uni, store


def test_manifest_roundtrip(export32):
    img, uni, _ = export32
    m = read_manifest(img)
    assert m["adapter_kind"] == "image" and not m["masked"]
    assert m["cache_file"] == "vision-clean.mtdpcache"
    m2 = read_manifest(uni)
    assert m2["adapter_kind"] == "univariate" and m2["masked"]


def test_image_extraction_conformance(export32):
    img, _, _ = export32
    report = run_extract(ExtractJob(export_dir=img, model="vit_tiny", seed=5))
    assert report["n"] == 32 and report["dim"] == IMAGE_MODELS["vit_tiny"].dim
    cache = eegfuse_teachers.cache_read(os.path.join(img, "vision-clean.mtdpcache"))
    assert cache.teacher == "vision" and cache.dim == report["dim"] and len(cache) == 32
    assert not cache.masked
    for v in cache.vectors.values():
        assert np.isfinite(v).all()


def test_repeated_extraction_identical_crc(export32):
    img, _, _ = export32
    r1 = run_extract(ExtractJob(export_dir=img, model="vit_tiny", seed=5))
    r2 = run_extract(ExtractJob(export_dir=img, model="vit_tiny", seed=5))
    assert r1["crc32"] == r2["crc32"]
    assert r1["nondeterministic_op_warnings"] == []


def test_univariate_extraction_and_masked_flag(export32):
    _, uni, _ = export32
    report = run_extract(ExtractJob(export_dir=uni, model="ts_tiny", seed=2))
    cache = eegfuse_teachers.cache_read(os.path.join(uni, "series-masked.mtdpcache"))
    assert cache.masked and cache.dim == SERIES_MODELS["ts_tiny"].dim and len(cache) == 32
    assert report["pooling"] == "positions-mean-then-channel-mean"


def test_extractor_cache_feeds_gate_training(export32, tmp_path):
    """Full interop: extractor caches (clean+masked) drive stage-1 training."""
    img, _, store = export32
    clean_dir = str(tmp_path / "clean")
    masked_dir = str(tmp_path / "masked")
    eegfuse_teachers.export_adapted_inputs(store, "image", clean_dir, teacher_name="vision")
    eegfuse_teachers.export_adapted_inputs(store, "image", masked_dir, teacher_name="vision",
                                           mask_seed=11)
    run_extract(ExtractJob(export_dir=clean_dir, model="vit_tiny", seed=5))
    run_extract(ExtractJob(export_dir=masked_dir, model="vit_tiny", seed=5))
    clean = eegfuse_teachers.cache_read(os.path.join(clean_dir, "vision-clean.mtdpcache"))
    masked = eegfuse_teachers.cache_read(os.path.join(masked_dir, "vision-masked.mtdpcache"))

    from eegfuse.distill import Stage1Config, build_bank, train_gate
    bank = build_bank({"vision": (clean, masked)}, store.sample_ids)
    gate, heads, report, trace = train_gate(bank, Stage1Config(seed=0, epochs=2))
    assert report.mean.shape == (1,) and report.mean[0] == 1.0


def test_vit_b_16_dim_recorded():
    model, spec = build_model("image", "vit_b_16", seed=0)
    assert spec.dim == 768 and spec.input_size == 224


def test_pooling_and_resize_options(export32):
    img, _, _ = export32
    r_mean = run_extract(ExtractJob(export_dir=img, model="vit_tiny", pooling="mean", seed=1))
    r_cls = run_extract(ExtractJob(export_dir=img, model="vit_tiny", pooling="cls", seed=1))
    assert r_mean["crc32"] != r_cls["crc32"]
    r_tile = run_extract(ExtractJob(export_dir=img, model="vit_tiny",
                                    resize_policy="tile", seed=1))
    assert r_tile["crc32"] != r_mean["crc32"]


def test_checkpoint_loading_changes_reps(export32, tmp_path):
    import torch
    img, _, _ = export32
    model, _ = build_model("image", "vit_tiny", seed=99)
    ckpt = str(tmp_path / "w.pt")
    torch.save(model.state_dict(), ckpt)
    r_default = run_extract(ExtractJob(export_dir=img, model="vit_tiny", seed=1))
    r_loaded = run_extract(ExtractJob(export_dir=img, model="vit_tiny", seed=1,
                                      checkpoint=ckpt))
    assert r_default["crc32"] != r_loaded["crc32"]
    assert r_loaded["checkpoint"] == ckpt


def test_cli_runs_and_reports(export32, capsys):
    img, _, _ = export32
    rc = main(["--export-dir", img, "--model", "vit_tiny", "--seed", "7"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n"] == 32
    rc = main(["--export-dir", str(img) + "-nope", "--model", "vit_tiny"])
    assert rc == 1


def test_cache_writer_rejects_mixed_dims(tmp_path):
    with pytest.raises(ValueError, match="inconsistent"):
        write_cache(str(tmp_path / "x.mtdpcache"), "t", False,
                    [("a", np.zeros(4, dtype=np.float32)), ("b", np.zeros(5, dtype=np.float32))])


def test_crc_trailer_matches_payload(export32):
    img, _, _ = export32
    run_extract(ExtractJob(export_dir=img, model="vit_tiny", seed=5))
    blob = open(os.path.join(img, "vision-clean.mtdpcache"), "rb").read()
    stored = int.from_bytes(blob[-4:], "little")
    assert stored == (zlib.crc32(blob[:-4]) & 0xFFFFFFFF)
