"""Declarative run configuration: INI file + CLI overrides, strict validation.

Every run resolves to a flat section.key=value map; its SHA-256 prefix names
all artifacts, so identical configs reuse identical paths and reruns are
idempotent.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass

from .errors import ConfigError
from .student import StudentConfig

# section -> key -> (type, default). Types: int, float, str, bool.
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "runs/default"),
    },
    "data": {
        "channels": (int, 4),
        "timesteps": (int, 400),
        "fs": (float, 100.0),
        "n_samples": (int, 400),
        "n_classes": (int, 2),
        "snr": (float, 1.0),
        "amp_jitter": (float, 0.4),
        "noise_jitter": (float, 0.4),
    },
    "mask": {
        "segment_prob": (float, 0.5),
    },
    "teachers": {
        "kinds": (str, "spectral,spectral_alt"),
        "dims": (str, "32"),           # one value broadcast, or one per kind
        "align": (str, "off"),         # "auto" enables fixed seeded aligners
        "fuse_dim": (int, 0),          # 0 -> common dim (or max under align)
        "export": (str, ""),
    },
    "gate": {
        "epochs": (int, 0),            # 0 -> auto (1 above 10k samples, else 5)
        "batch_size": (int, 64),
        "lr": (float, 5e-4),
        "weight_decay": (float, 5e-2),
        "clip_norm": (float, 1.0),
    },
    "student": {
        "patch_len": (int, 40),
        "d_model": (int, 64),
        "n_layers": (int, 4),
        "n_heads": (int, 4),
        "spatial_heads": (int, 2),
        "temporal_heads": (int, 2),
        "ffn_dim": (int, 256),
        "dropout": (float, 0.0),
    },
    "distill": {
        "steps": (int, 2000),
        "batch_size": (int, 32),
        "lr": (float, 5e-4),
        "lr_min": (float, 1e-5),
        "weight_decay": (float, 5e-2),
        "clip_norm": (float, 1.0),
        "eval_every": (int, 50),
        "stop_similarity": (float, 0.97),
    },
    "probe": {
        "l2_grid": (str, "1e-6,1e-5,1e-4,1e-3,1e-2,1e-1"),
    },
    "finetune": {
        "backbone_lrs": (str, "5e-5,1e-4,5e-4"),
        "multi_lr": (str, "yes,no"),
        "epochs": (int, 50),
        "batch_size": (int, 64),
        "dropout": (float, 0.1),
        "label_smoothing": (float, 0.1),
    },
}

TEACHER_KINDS = ("spectral", "spectral_alt", "noise")


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def out_dir(self) -> str:
        return os.environ.get("EEGFUSE_OUT_DIR") or self.values["run"]["out_dir"]

    def teacher_kinds(self) -> list[str]:
        return [k.strip() for k in self.values["teachers"]["kinds"].split(",") if k.strip()]

    def teacher_dims(self) -> list[int]:
        dims = [int(v) for v in str(self.values["teachers"]["dims"]).split(",") if v.strip()]
        kinds = self.teacher_kinds()
        if len(dims) == 1:
            dims = dims * len(kinds)
        return dims

    def fuse_dim(self) -> int:
        explicit = self.values["teachers"]["fuse_dim"]
        if explicit:
            return explicit
        dims = self.teacher_dims()
        return max(dims) if self.values["teachers"]["align"] == "auto" else dims[0]

    def l2_grid(self) -> tuple[float, ...]:
        return tuple(float(v) for v in self.values["probe"]["l2_grid"].split(","))

    def backbone_lrs(self) -> tuple[float, ...]:
        return tuple(float(v) for v in self.values["finetune"]["backbone_lrs"].split(","))

    def multi_lr(self) -> tuple[bool, ...]:
        opts = [v.strip().lower() for v in self.values["finetune"]["multi_lr"].split(",")]
        return tuple(o in ("yes", "true", "on", "1") for o in opts)

    def student_config(self) -> StudentConfig:
        s, d = self.values["student"], self.values["data"]
        return StudentConfig(channels=d["channels"], timesteps=d["timesteps"],
                             patch_len=s["patch_len"], d_model=s["d_model"],
                             n_layers=s["n_layers"], n_heads=s["n_heads"],
                             spatial_heads=s["spatial_heads"], temporal_heads=s["temporal_heads"],
                             ffn_dim=s["ffn_dim"], dropout=s["dropout"])

    def canonical_text(self) -> str:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                if (section, key) == ("run", "out_dir"):
                    continue  # locational, not semantic: hash must survive moves
                lines.append(f"{section}.{key}={self.values[section][key]!r}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:12]

    def artifact(self, name: str) -> str:
        return os.path.join(self.out_dir, name.format(h=self.config_hash()))

    def write_resolved(self) -> str:
        """Archive the resolved config beside the run's artifacts."""
        os.makedirs(self.out_dir, exist_ok=True)
        cp = configparser.ConfigParser()
        for section in sorted(self.values):
            cp[section] = {k: str(v) for k, v in sorted(self.values[section].items())}
        buf = io.StringIO()
        cp.write(buf)
        path = self.artifact("resolved-config-{h}.ini")
        with open(path, "w") as f:
            f.write(buf.getvalue())
        return path


def _coerce(section: str, key: str, raw: str, violations: list[str]):
    typ, _ = SCHEMA[section][key]
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        violations.append(f"{section}.{key}: cannot parse {raw!r} as {typ.__name__}")
        return SCHEMA[section][key][1]


def load_config(path: str | None, overrides: list[str] = ()) -> RunConfig:
    """Parse + validate; raises ConfigError listing every violation."""
    violations: list[str] = []
    values = {s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()}

    if path is not None:
        if not os.path.exists(path):
            raise ConfigError([f"config file not found: {path}"])
        cp = configparser.ConfigParser()
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError([f"config parse error: {e}"])
        for section in cp.sections():
            if section not in SCHEMA:
                violations.append(f"unknown section [{section}]")
                continue
            for key, raw in cp[section].items():
                if key not in SCHEMA[section]:
                    violations.append(f"unknown key {section}.{key}")
                    continue
                values[section][key] = _coerce(section, key, raw, violations)

    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            violations.append(f"override must look like section.key=value, got {ov!r}")
            continue
        target, raw = ov.split("=", 1)
        section, key = target.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA.get(section, {}):
            violations.append(f"unknown override target {section}.{key}")
            continue
        values[section][key] = _coerce(section, key, raw, violations)

    cfg = RunConfig(values=values)
    violations.extend(semantic_violations(cfg))
    if violations:
        raise ConfigError(violations)
    return cfg


def semantic_violations(cfg: RunConfig) -> list[str]:
    v: list[str] = []
    d, s = cfg["data"], cfg["student"]
    if d["timesteps"] % s["patch_len"] != 0:
        v.append(f"T={d['timesteps']} not divisible by patch_len={s['patch_len']}")
    if s["patch_len"] % 8 != 0:
        v.append(f"patch_len={s['patch_len']} must be divisible by 8")
    if s["d_model"] % 8 != 0 or s["d_model"] % s["n_heads"] != 0:
        v.append(f"d_model={s['d_model']} must divide by 8 and by n_heads={s['n_heads']}")
    if s["spatial_heads"] + s["temporal_heads"] != s["n_heads"]:
        v.append("spatial_heads + temporal_heads != n_heads")
    if d["timesteps"] < 2 * int(round(d["fs"])):
        v.append(f"T={d['timesteps']} too short to mask (need >= 2*fs={2 * int(round(d['fs']))})")
    if d["fs"] <= 90.0:
        v.append(f"fs={d['fs']} puts the 45 Hz teacher band above Nyquist")
    if d["n_classes"] < 2:
        v.append("n_classes must be >= 2")
    kinds = cfg.teacher_kinds()
    if not kinds:
        v.append("teachers.kinds is empty")
    for k in kinds:
        if k not in TEACHER_KINDS:
            v.append(f"unknown teacher kind {k!r}")
    if len(set(kinds)) != len(kinds):
        v.append("duplicate teacher kinds")
    align = cfg["teachers"]["align"]
    if align not in ("off", "auto"):
        v.append(f"teachers.align must be off or auto, got {align!r}")
    try:
        dims = cfg.teacher_dims()
        if kinds and len(dims) != len(kinds):
            v.append(f"teachers.dims has {len(dims)} entries for {len(kinds)} kinds")
        elif len(set(dims)) > 1 and align != "auto":
            v.append(f"fusion dimension mismatch: teacher dims {dims} with no aligner "
                     "(set teachers.align = auto)")
    except ValueError:
        v.append("teachers.dims: unparseable int list")
    for kind in [e.strip() for e in cfg["teachers"]["export"].split(",") if e.strip()]:
        if kind not in ("image", "univariate"):
            v.append(f"unknown export adapter {kind!r}")
    try:
        if not cfg.backbone_lrs() or not cfg.multi_lr():
            v.append("fine-tuning grid is empty")
    except ValueError:
        v.append("finetune.backbone_lrs: unparseable float list")
    try:
        cfg.l2_grid()
    except ValueError:
        v.append("probe.l2_grid: unparseable float list")
    if cfg["distill"]["steps"] < 1:
        v.append("distill.steps must be >= 1")
    # all teachers share teachers.dim, so fusion dims always agree here; the
    # library-level aligner path covers heterogeneous external caches
    return v
