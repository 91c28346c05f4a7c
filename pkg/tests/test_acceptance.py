"""Acceptance criteria, one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as they
complete. All tolerances are fixed here; nothing is calibrated at runtime.
"""

import itertools
import os
import time
import warnings

import numpy as np
import pytest

from eegfuse import autodiff as ad
from eegfuse.autodiff import Tensor
from eegfuse.cli import main as cli_main
from eegfuse.data import (SynthSpec, normalize_store, read_segments, synth_dataset,
                          write_segments)
from eegfuse.distill import (GateNetwork, Stage1Config, Stage2Config, build_bank,
                             save_gate, smoothed, train_gate, train_student)
from eegfuse.errors import BadMagicError, ChecksumError, TruncatedError
from eegfuse.evaluation import (TaskSpec, auc_pr, auroc, balanced_accuracy,
                                cohen_kappa, extract_features, probe_sweep,
                                weighted_f1)
from eegfuse.gradcheck import check_gradients
from eegfuse.masking import MaskKind, sample_mask
from eegfuse.rng import RngStreams, stream
from eegfuse.student import StudentConfig, StudentEncoder
from eegfuse.teachers import cache_read, cache_write, make_teacher, precompute_reps

from test_metrics import (oracle_ap, oracle_auroc, oracle_balanced_accuracy,
                          oracle_kappa, oracle_weighted_f1)


def report(name: str):
    print(f"\nACCEPTANCE {name}: PASS")


# ---------------------------------------------------------------------------
# Gradient oracle


def test_gradient_oracle():
    t0 = time.time()
    rng = stream(99, "accept-grad")

    def t64(shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)

    checked = 0

    def check(fn, params, tol, n):
        nonlocal checked
        err = check_gradients(fn, params, stream(1, "pick"), n_coords=n)
        assert err < tol, f"relative error {err:.3e} >= {tol}"
        checked += min(n, sum(p.size for p in params))

    # smooth primitives at 1e-6
    x, w, b = t64((3, 6)), t64((6, 5)), t64((5,))
    check(lambda: ad.sum_(ad.mul(ad.linear(x, w, b), ad.linear(x, w, b))), [x, w, b], 1e-6, 40)
    xc, wc, bc = t64((2, 3, 16)), t64((4, 3, 5), 0.5), t64((4,), 0.1)
    check(lambda: ad.sum_(ad.mul(ad.conv1d(xc, wc, bc, 2, 2), ad.conv1d(xc, wc, bc, 2, 2))),
          [xc, wc, bc], 1e-6, 40)
    xd, wd, bd = t64((2, 4, 5, 6)), t64((4, 3, 3), 0.5), t64((4,), 0.1)
    check(lambda: ad.sum_(ad.mul(ad.depthwise_conv2d(xd, wd, bd, (1, 1)),
                                 ad.depthwise_conv2d(xd, wd, bd, (1, 1)))), [xd, wd, bd], 1e-6, 40)
    xl, g, be = t64((4, 8)), t64((8,), 0.2), t64((8,), 0.2)
    gl = Tensor(1.0 + 0.1 * rng.standard_normal(8), requires_grad=True, dtype=np.float64)
    check(lambda: ad.sum_(ad.mul(ad.layer_norm(xl, gl, be), ad.layer_norm(xl, gl, be))),
          [xl, gl, be], 1e-6, 24)
    q, k, v = t64((2, 5, 4)), t64((2, 5, 4)), t64((2, 5, 4))

    def att():
        o, _ = ad.scaled_dot_product_attention(q, k, v)
        return ad.sum_(ad.mul(o, o))

    check(att, [q, k, v], 1e-6, 40)
    xg = t64((6, 6))
    check(lambda: ad.sum_(ad.mul(ad.gelu(xg), ad.gelu(xg))), [xg], 1e-6, 24)
    xe = t64((6, 6))
    check(lambda: ad.sum_(ad.mul(ad.elu(xe), ad.elu(xe))), [xe], 1e-6, 24)
    a1, b1 = t64((4, 7)), t64((4, 7))
    check(lambda: ad.mse_loss(a1, b1), [a1, b1], 1e-6, 24)
    a2, b2 = t64((4, 7)), t64((4, 7))
    check(lambda: ad.cosine_embedding_loss(a2, b2), [a2, b2], 1e-6, 24)

    # relu away from the kink at 1e-4
    xr = Tensor(rng.standard_normal((8, 8)), requires_grad=True, dtype=np.float64)
    xr.data[np.abs(xr.data) < 1e-3] = 0.3
    check(lambda: ad.sum_(ad.mul(ad.relu(xr), ad.relu(xr))), [xr], 1e-4, 32)

    # full student encoder, desk config, >= 200 coordinates
    enc = StudentEncoder(StudentConfig(), RngStreams(7), dtype=np.float64)
    xs = Tensor(stream(3, "x").standard_normal((2, 4, 400)), dtype=np.float64)
    target = np.tile(stream(4, "t").standard_normal(64), (2, 1))

    def encoder_loss():
        return ad.cosine_embedding_loss(enc(xs), Tensor(target, dtype=np.float64))

    err = check_gradients(encoder_loss, list(enc.named_parameters().values()),
                          stream(5, "pick"), n_coords=200)
    assert err < 1e-4, f"encoder relative error {err:.3e}"
    checked += 200

    elapsed = time.time() - t0
    assert checked >= 200
    assert elapsed < 120, f"gradient oracle took {elapsed:.0f}s"
    report(f"gradient-oracle ({checked} coordinates, {elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# Gate simplex property


def test_simplex_property():
    gate = GateNetwork([16, 16, 16], hidden=16, rngs=RngStreams(11))
    x = stream(12, "simplex").standard_normal((10_000, 48)).astype(np.float32) * 4
    w = gate.weights_np(x)
    assert (w > 0).all()
    assert np.abs(w.sum(axis=1) - 1.0).max() <= 1e-6
    single = GateNetwork([8], hidden=8, rngs=RngStreams(13))
    for _ in range(20):
        out = single.weights_np(stream(14, "one").standard_normal((1, 8)).astype(np.float32))
        assert out[0, 0] == 1.0
    report("simplex-property (10k inputs; K=1 returns exactly 1.0)")


# ---------------------------------------------------------------------------
# Metric oracles


def test_metric_oracles():
    # worked examples reproduce exactly
    assert auroc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75
    assert cohen_kappa([0] * 4 + [1] * 4, [0, 0, 0, 1, 1, 0, 1, 1]) == pytest.approx(0.5, abs=1e-12)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for k in (2, 3):
            for n in range(1, 7):
                for cells in itertools.product(range(n + 1), repeat=k * k):
                    if sum(cells) != n:
                        continue
                    t, p = [], []
                    for idx, count in enumerate(cells):
                        t += [idx // k] * count
                        p += [idx % k] * count
                    assert balanced_accuracy(t, p) == pytest.approx(
                        oracle_balanced_accuracy(t, p), abs=1e-9)
                    assert cohen_kappa(t, p) == pytest.approx(oracle_kappa(t, p), abs=1e-9)
                    assert weighted_f1(t, p) == pytest.approx(oracle_weighted_f1(t, p), abs=1e-9)

    rng = stream(15, "rank")
    for n in range(2, 7):
        labels = [t for t in itertools.product((0, 1), repeat=n) if 0 < sum(t) < n]
        if n <= 4:
            scores = list(itertools.product((0.2, 0.5, 0.8), repeat=n))
        else:
            scores = [tuple(rng.uniform(0, 1, n)) for _ in range(30)]
            scores += [tuple(rng.choice([0.2, 0.5, 0.8], n)) for _ in range(15)] + [(0.5,) * n]
        for t in labels:
            for s in scores:
                assert auroc(t, s) == pytest.approx(oracle_auroc(t, s), abs=1e-9)
                assert auc_pr(t, s) == pytest.approx(oracle_ap(t, s), abs=1e-9)
    report("metric-oracles (exhaustive n<=6 vs brute force at 1e-9)")


# ---------------------------------------------------------------------------
# Stage-1 dominance


def test_stage1_dominance():
    t0 = time.time()
    wins, weights = 0, []
    for seed in range(5):
        raw, _ = synth_dataset(SynthSpec(n_samples=300, n_classes=2, snr=1.0, seed=seed))
        store = normalize_store(raw)
        spectral = make_teacher("spectral", store.channels, store.fs, 32, seed * 7 + 1)
        noise = make_teacher("noise", store.channels, store.fs, 32, seed * 7 + 2)
        caches = {"spectral": precompute_reps(store, spectral, mask_seed=seed * 7 + 3),
                  "noise": precompute_reps(store, noise, mask_seed=seed * 7 + 3)}
        bank = build_bank(caches, store.sample_ids)
        _, _, rep, _ = train_gate(bank, Stage1Config(seed=seed, epochs=60))
        weights.append(rep.mean[0])
        wins += rep.mean[0] >= 0.6
    elapsed = time.time() - t0
    assert wins >= 4, f"informative teacher won {wins}/5 seeds, weights {np.round(weights, 3)}"
    assert elapsed < 300, f"dominance took {elapsed:.0f}s"
    report(f"stage1-dominance ({wins}/5 seeds, weights {np.round(weights, 2).tolist()}, {elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# Stage-2 convergence (desk config)


def test_stage2_convergence():
    t0 = time.time()
    raw, split = synth_dataset(SynthSpec(n_samples=400, n_classes=2, snr=1.0, seed=21))
    store = normalize_store(raw)
    teachers = [make_teacher("spectral", store.channels, store.fs, 32, 31),
                make_teacher("spectral_alt", store.channels, store.fs, 32, 32)]
    caches = {t.name: precompute_reps(store, t, mask_seed=33) for t in teachers}
    bank = build_bank(caches, store.sample_ids)
    gate, _, _, _ = train_gate(bank, Stage1Config(seed=21, epochs=30))
    cfg = Stage2Config(steps=2000, batch_size=32, eval_every=50, stop_similarity=0.97, seed=21)
    res = train_student(store, bank, gate, StudentConfig(), cfg, split.train, split.val)
    elapsed = time.time() - t0
    assert res.steps_run <= 2000
    assert res.holdout_similarity >= 0.95, f"held-out cosine {res.holdout_similarity:.4f}"
    sm = smoothed([l for _, _, l in res.trace], window=20)
    rises = np.diff(sm)
    assert (rises <= 0).all(), f"smoothed trace rises by up to {rises.max():.3e}"
    assert elapsed < 600, f"stage 2 took {elapsed:.0f}s"
    report(f"stage2-convergence (cosine {res.holdout_similarity:.3f} in {res.steps_run} steps, {elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# Distillation benefit (probe comparison)


def test_distillation_benefit():
    t0 = time.time()
    diffs = []
    for seed in range(5):
        spec = SynthSpec(n_samples=400, n_classes=4, snr=0.5, seed=seed,
                         class_structure="topography", amp_jitter=0.7,
                         noise_jitter=0.5, channel_gain_jitter=0.5)
        raw, split = synth_dataset(spec)
        store = normalize_store(raw)
        teachers = [make_teacher("spectral", store.channels, store.fs, 32, seed * 13 + 1),
                    make_teacher("spectral_alt", store.channels, store.fs, 32, seed * 13 + 2)]
        caches = {t.name: precompute_reps(store, t, mask_seed=seed * 13 + 3) for t in teachers}
        bank = build_bank(caches, store.sample_ids)
        gate, _, _, _ = train_gate(bank, Stage1Config(seed=seed, epochs=30))
        scfg = StudentConfig(n_layers=2)
        res = train_student(store, bank, gate, scfg,
                            Stage2Config(steps=800, eval_every=50, stop_similarity=0.99, seed=seed),
                            split.train, split.val)
        task = TaskSpec(name="bench", store=store, split=split)
        labels = np.asarray(store.labels)
        ba_d = probe_sweep(extract_features(res.encoder, store), labels,
                           task).test_scores["balanced_accuracy"]
        rnd = StudentEncoder(scfg, RngStreams(seed + 5000))
        ba_r = probe_sweep(extract_features(rnd, store), labels,
                           task).test_scores["balanced_accuracy"]
        diffs.append(ba_d - ba_r)
    elapsed = time.time() - t0
    median_gap = float(np.median(diffs)) * 100
    assert median_gap >= 5.0, f"median probe gap {median_gap:.1f} pts, diffs {np.round(diffs, 3)}"
    assert elapsed < 600, f"benefit comparison took {elapsed:.0f}s"
    report(f"distillation-benefit (median +{median_gap:.1f} pts over 5 seeds, {elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# Freezing contract


def test_freezing_contract(tmp_path):
    raw, split = synth_dataset(SynthSpec(n_samples=96, n_classes=2, snr=1.0, seed=41))
    store = normalize_store(raw)
    teachers = [make_teacher("spectral", store.channels, store.fs, 32, 42),
                make_teacher("spectral_alt", store.channels, store.fs, 32, 43)]
    teacher_bytes_before = [t.projection.tobytes() for t in teachers]
    embed_before = [t.embed(store.segments[0], store.sample_ids[0]).tobytes() for t in teachers]
    caches = {t.name: precompute_reps(store, t, mask_seed=44) for t in teachers}
    bank = build_bank(caches, store.sample_ids)
    gate, heads, _, _ = train_gate(bank, Stage1Config(seed=41, epochs=5))
    gate_blob_before = save_gate(str(tmp_path / "g1.mtdg"), gate, heads)
    cfg = Stage2Config(steps=120, eval_every=40, stop_similarity=2.0, seed=41)
    scfg = StudentConfig(n_layers=1)
    train_student(store, bank, gate, scfg, cfg, split.train, split.val)
    gate_blob_after = save_gate(str(tmp_path / "g2.mtdg"), gate, heads)
    assert gate_blob_before == gate_blob_after
    for t, blob, emb in zip(teachers, teacher_bytes_before, embed_before):
        assert t.projection.tobytes() == blob
        assert t.embed(store.segments[0], store.sample_ids[0]).tobytes() == emb
    report("freezing-contract (gate and teacher bytes identical through stage 2)")


# ---------------------------------------------------------------------------
# Determinism of the full pipeline


FAST_PIPELINE = [
    "data.n_samples=120", "student.n_layers=1", "distill.steps=150",
    "distill.eval_every=50", "distill.stop_similarity=0.9", "gate.epochs=8",
    "run.seed=77",
]


def _run_pipeline(out_dir: str):
    for cmd in ("synth-data", "extract", "train-gate", "distill", "probe", "report"):
        overrides = [f"run.out_dir={out_dir}"] + FAST_PIPELINE
        rc = cli_main([cmd] + sum((["--set", ov] for ov in overrides), []))
        assert rc == 0, cmd


def test_pipeline_determinism(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    _run_pipeline(a)
    _run_pipeline(b)
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b))
    compared = []
    for name in names:
        pa, pb = os.path.join(a, name), os.path.join(b, name)
        if os.path.isdir(pa) or name.startswith("resolved-config-"):
            continue  # the provenance archive records out_dir itself
        assert open(pa, "rb").read() == open(pb, "rb").read(), f"{name} differs"
        compared.append(name)
    assert any(n.endswith(".mtdw") for n in compared)
    assert any(n.endswith(".mtdg") for n in compared)
    assert any(n.startswith("report-") for n in compared)
    report(f"determinism ({len(compared)} artifacts byte-identical across two runs)")


# ---------------------------------------------------------------------------
# Format round-trips and corruption errors


def test_format_roundtrips(tmp_path):
    raw, _ = synth_dataset(SynthSpec(n_samples=10, n_classes=2, seed=51))
    store = normalize_store(raw)

    seg_path = str(tmp_path / "d.eegseg")
    write_segments(store, seg_path)
    blob = open(seg_path, "rb").read()
    write_segments(read_segments(seg_path), str(tmp_path / "d2.eegseg"))
    assert open(str(tmp_path / "d2.eegseg"), "rb").read() == blob
    open(seg_path, "wb").write(b"XXXX" + blob[4:])
    with pytest.raises(BadMagicError):
        read_segments(seg_path)
    open(seg_path, "wb").write(blob[:-8])
    with pytest.raises(TruncatedError):
        read_segments(seg_path)

    teacher = make_teacher("spectral", store.channels, store.fs, 16, 52)
    clean, _ = precompute_reps(store, teacher)
    cache_path = str(tmp_path / "c.mtdpcache")
    cache_write(clean, cache_path)
    cblob = open(cache_path, "rb").read()
    cache_write(cache_read(cache_path), str(tmp_path / "c2.mtdpcache"))
    assert open(str(tmp_path / "c2.mtdpcache"), "rb").read() == cblob
    corrupted = bytearray(cblob)
    corrupted[40] ^= 0x01
    open(cache_path, "wb").write(bytes(corrupted))
    with pytest.raises(ChecksumError):
        cache_read(cache_path)
    report("format-roundtrips")


def test_checkpoint_roundtrip_formats(tmp_path):
    enc = StudentEncoder(StudentConfig(n_layers=1), RngStreams(53))
    p = str(tmp_path / "s.mtdw")
    blob = enc.save(p)
    again = StudentEncoder.load(p).save(str(tmp_path / "s2.mtdw"))
    assert blob == again
    corrupted = bytearray(blob)
    corrupted[64] ^= 0xFF
    open(p, "wb").write(bytes(corrupted))
    with pytest.raises(ChecksumError):
        StudentEncoder.load(p)
    report("checkpoint-roundtrips")


# ---------------------------------------------------------------------------
# Masking statistics


def test_masking_statistics():
    rng = stream(61, "accept-mask")
    C, T, fs = 4, 250, 100.0
    kinds, lengths = [], []
    for _ in range(10_000):
        spec, mask = sample_mask(C, T, fs, rng)
        kinds.append(spec.kind is MaskKind.SEGMENT)
        if spec.kind is MaskKind.SEGMENT:
            lengths.append(spec.length)
        else:
            assert (mask == 0).sum() == T
    frac = float(np.mean(kinds))
    assert abs(frac - 0.5) <= 0.02, f"segment fraction {frac}"
    assert min(lengths) == 100 and max(lengths) == 200
    report(f"masking-statistics (mix {frac:.3f}, lengths span [{min(lengths)}, {max(lengths)}])")
