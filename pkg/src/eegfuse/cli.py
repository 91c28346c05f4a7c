"""Operator surface: one binary running the full pipeline stage by stage.

    eegfuse synth-data  --config run.ini          # labeled synthetic store
    eegfuse extract     --config run.ini          # teacher rep caches (+exports)
    eegfuse train-gate  --config run.ini          # stage 1
    eegfuse distill     --config run.ini          # stage 2
    eegfuse probe       --config run.ini          # linear-probe report
    eegfuse finetune    --config run.ini          # fine-tuning report
    eegfuse report      --config run.ini          # merged run summary
    eegfuse validate-config --config run.ini

Artifacts land in run.out_dir (env EEGFUSE_OUT_DIR overrides), named by the
resolved-config hash, so reruns with the same config are idempotent.

Exit codes: 0 ok, 1 usage/config, 2 missing prerequisite, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig, load_config
from .data import (SynthSpec, normalize_store, read_segments, reject_amplitude,
                   synth_dataset, write_segments)
from .distill import (Stage1Config, Stage2Config, build_bank, load_gate,
                      save_gate, train_gate, train_student, write_trace)
from .errors import ConfigError, MissingPrerequisiteError, NumericalError
from .evaluation import FinetuneConfig, TaskSpec, evaluate, read_report, write_report
from .rng import stream
from .student import StudentEncoder
from .teachers import (cache_read, cache_write, export_adapted_inputs,
                       make_teacher, precompute_reps)


def _require(path: str, producer: str) -> str:
    if not os.path.exists(path):
        raise MissingPrerequisiteError(os.path.basename(path), producer)
    return path


def _teacher_seed(cfg: RunConfig, kind: str) -> int:
    return int(stream(cfg.seed, f"teacher-seed/{kind}").integers(0, 2 ** 31))


def _load_split(cfg: RunConfig):
    from .data import TaskSplit
    with open(_require(cfg.artifact("split-{h}.json"), "synth-data")) as f:
        raw = json.load(f)
    return TaskSplit(train=raw["train"], val=raw["val"], test=raw["test"],
                     n_classes=raw["n_classes"])


def _load_store(cfg: RunConfig):
    return read_segments(_require(cfg.artifact("data-{h}.eegseg"), "synth-data"))


def _build_teachers(cfg: RunConfig, store):
    teachers = []
    for kind, dim in zip(cfg.teacher_kinds(), cfg.teacher_dims()):
        teachers.append(make_teacher(kind, store.channels, store.fs, dim,
                                     seed=_teacher_seed(cfg, kind)))
    return teachers


def _cache_paths(cfg: RunConfig, name: str) -> tuple[str, str]:
    return (cfg.artifact(f"reps-{name}-clean-{{h}}.mtdpcache"),
            cfg.artifact(f"reps-{name}-masked-{{h}}.mtdpcache"))


def _load_bank(cfg: RunConfig, store):
    caches = {}
    for kind in cfg.teacher_kinds():
        clean_p, masked_p = _cache_paths(cfg, kind)
        caches[kind] = (cache_read(_require(clean_p, "extract")),
                        cache_read(_require(masked_p, "extract")))
    aligners = None
    dims = {name: c[0].dim for name, c in caches.items()}
    if len(set(dims.values())) > 1:
        fuse = cfg.fuse_dim()
        aligners = {}
        for name, d in dims.items():
            if d != fuse:
                rng = stream(_teacher_seed(cfg, name), f"aligner/{name}/{d}->{fuse}")
                aligners[name] = (rng.standard_normal((d, fuse)) / np.sqrt(d)).astype(np.float32)
    return build_bank(caches, store.sample_ids, aligners)


# -- subcommands --------------------------------------------------------------------


def cmd_validate(cfg: RunConfig) -> int:
    print(f"config ok (hash {cfg.config_hash()})")
    return 0


def cmd_synth_data(cfg: RunConfig) -> int:
    d = cfg["data"]
    spec = SynthSpec(channels=d["channels"], timesteps=d["timesteps"], fs=d["fs"],
                     n_samples=d["n_samples"], n_classes=d["n_classes"], snr=d["snr"],
                     seed=cfg.seed, amp_jitter=d["amp_jitter"], noise_jitter=d["noise_jitter"])
    raw_store, split = synth_dataset(spec)
    kept = [i for i, seg in enumerate(raw_store.segments) if reject_amplitude(seg)]
    if len(kept) != len(raw_store):
        raise NumericalError(f"synthetic generator produced {len(raw_store) - len(kept)} "
                             "over-amplitude segments")
    store = normalize_store(raw_store)
    write_segments(store, cfg.artifact("data-{h}.eegseg"))
    with open(cfg.artifact("split-{h}.json"), "w") as f:
        json.dump({"train": split.train, "val": split.val, "test": split.test,
                   "n_classes": split.n_classes}, f, indent=2)
    print(f"wrote {len(store)} segments -> {cfg.artifact('data-{h}.eegseg')}")
    return 0


def cmd_extract(cfg: RunConfig) -> int:
    store = _load_store(cfg)
    for teacher in _build_teachers(cfg, store):
        clean, masked = precompute_reps(store, teacher, mask_seed=cfg.seed,
                                        segment_prob=cfg["mask"]["segment_prob"])
        clean_p, masked_p = _cache_paths(cfg, teacher.name)
        cache_write(clean, clean_p)
        cache_write(masked, masked_p)
        print(f"cached {teacher.name}: {len(clean)} clean + {len(masked)} masked (d={teacher.dim})")
    for kind in [e.strip() for e in cfg["teachers"]["export"].split(",") if e.strip()]:
        out = cfg.artifact(f"export-{kind}-{{h}}")
        manifest = export_adapted_inputs(store, kind, out, mask_seed=None)
        print(f"exported {kind} inputs -> {out} (cache target {manifest['cache_file']})")
    return 0


def cmd_train_gate(cfg: RunConfig) -> int:
    store = _load_store(cfg)
    bank = _load_bank(cfg, store)
    g = cfg["gate"]
    s1 = Stage1Config(epochs=g["epochs"] or None, batch_size=g["batch_size"], lr=g["lr"],
                      weight_decay=g["weight_decay"], clip_norm=g["clip_norm"], seed=cfg.seed)
    gate, heads, report, trace = train_gate(bank, s1)
    save_gate(cfg.artifact("gate-{h}.mtdg"), gate, heads)
    write_trace(cfg.artifact("stage1-trace-{h}.csv"), trace)
    with open(cfg.artifact("gate-weights-{h}.json"), "w") as f:
        json.dump({"teachers": report.teachers,
                   "mean": [round(float(w), 6) for w in report.mean],
                   "histogram": report.histogram.tolist(),
                   "bin_edges": report.bin_edges.tolist()}, f, indent=2)
    weights = ", ".join(f"{t}={w:.3f}" for t, w in zip(report.teachers, report.mean))
    print(f"gate trained ({len(trace)} steps); mean weights: {weights}")
    return 0


def cmd_distill(cfg: RunConfig) -> int:
    store = _load_store(cfg)
    split = _load_split(cfg)
    bank = _load_bank(cfg, store)
    gate, _ = load_gate(_require(cfg.artifact("gate-{h}.mtdg"), "train-gate"))
    dd = cfg["distill"]
    s2 = Stage2Config(steps=dd["steps"], batch_size=dd["batch_size"], lr=dd["lr"],
                      lr_min=dd["lr_min"], weight_decay=dd["weight_decay"],
                      clip_norm=dd["clip_norm"], eval_every=dd["eval_every"],
                      stop_similarity=dd["stop_similarity"], seed=cfg.seed)
    result = train_student(store, bank, gate, cfg.student_config(), s2,
                           split.train, split.val)
    result.encoder.save(cfg.artifact("student-{h}.mtdw"))
    write_trace(cfg.artifact("stage2-trace-{h}.csv"), result.trace)
    print(f"distilled student: {result.steps_run} steps, "
          f"held-out cosine {result.holdout_similarity:.4f}")
    return 0


def _task(cfg: RunConfig) -> TaskSpec:
    return TaskSpec(name="synthetic", store=_load_store(cfg), split=_load_split(cfg))


def cmd_probe(cfg: RunConfig) -> int:
    encoder = StudentEncoder.load(_require(cfg.artifact("student-{h}.mtdw"), "distill"))
    report = evaluate(encoder, [_task(cfg)], mode="probe", seed=cfg.seed,
                      l2_grid=cfg.l2_grid())
    path = cfg.artifact("probe-report-{h}.json")
    write_report(path, report)
    print(f"probe report -> {path}: {json.dumps(report['synthetic'])}")
    return 0


def cmd_finetune(cfg: RunConfig) -> int:
    ckpt = _require(cfg.artifact("student-{h}.mtdw"), "distill")
    encoder = StudentEncoder.load(ckpt)
    ft = cfg["finetune"]
    ft_cfg = FinetuneConfig(backbone_lrs=cfg.backbone_lrs(), multi_lr=cfg.multi_lr(),
                            epochs=ft["epochs"], batch_size=ft["batch_size"],
                            dropout=ft["dropout"], label_smoothing=ft["label_smoothing"],
                            seed=cfg.seed)
    report = evaluate(encoder, [_task(cfg)], mode="finetune", seed=cfg.seed,
                      encoder_ckpt=ckpt, finetune_cfg=ft_cfg)
    path = cfg.artifact("finetune-report-{h}.json")
    write_report(path, report)
    print(f"finetune report -> {path}: {json.dumps(report['synthetic'])}")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    merged: dict = {"hash": cfg.config_hash(), "seed": cfg.seed}
    found = False
    for mode in ("probe", "finetune"):
        path = cfg.artifact(f"{mode}-report-{{h}}.json")
        if os.path.exists(path):
            merged[mode] = read_report(path)
            found = True
    if not found:
        raise MissingPrerequisiteError("probe/finetune reports", "probe or finetune")
    gate_weights = cfg.artifact("gate-weights-{h}.json")
    if os.path.exists(gate_weights):
        with open(gate_weights) as f:
            merged["gate_weights"] = json.load(f)
    path = cfg.artifact("report-{h}.json")
    with open(path, "w") as f:
        json.dump(merged, f, indent=2, sort_keys=True)
    print(json.dumps(merged, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "validate-config": cmd_validate,
    "synth-data": cmd_synth_data,
    "extract": cmd_extract,
    "train-gate": cmd_train_gate,
    "distill": cmd_distill,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="eegfuse", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="INI config path (defaults apply if omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config value")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        for violation in e.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return 1

    try:
        if args.command != "validate-config":
            cfg.write_resolved()
        return COMMANDS[args.command](cfg)
    except MissingPrerequisiteError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
