"""Two-stage pretraining: gate training via masked latent denoising, then
distillation of the gated fusion into the student encoder.

Stage 1 trains a small gating MLP plus one linear prediction head per teacher:
the gate weighs masked teacher reps, the weighted sum must predict every
teacher's clean rep (per-sample sum of squared-L2 terms, batch-averaged).
Stage 2 freezes the gate, recomputes weights per sample from unmasked reps,
and trains the student + projection head with a cosine objective against the
fused vectors. Teachers never receive gradients; reps come from caches only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import GATE_MAGIC, read_checkpoint, write_checkpoint
from .data import SegmentStore
from .errors import NumericalError
from .nn import Linear, Module
from .optim import AdamW, OptimizerConfig, cosine_annealing_lr
from .rng import RngStreams
from .student import StudentConfig, StudentEncoder
from .teachers import RepCache


# -- models ----------------------------------------------------------------------


class GateNetwork(Module):
    """Two-layer MLP with ReLU, softmax over one logit per teacher."""

    def __init__(self, teacher_dims: list[int], hidden: int, rngs: RngStreams, dtype=np.float32):
        super().__init__()
        self.teacher_dims = list(teacher_dims)
        self.hidden = hidden
        k = len(teacher_dims)
        self.lin1 = self.add_child("lin1", Linear(sum(teacher_dims), hidden, rngs.stream("init/gate1"), dtype))
        self.lin2 = self.add_child("lin2", Linear(hidden, k, rngs.stream("init/gate2"), dtype))

    @property
    def n_teachers(self) -> int:
        return len(self.teacher_dims)

    def __call__(self, concat_reps: Tensor) -> Tensor:
        if concat_reps.shape[-1] != sum(self.teacher_dims):
            raise ValueError(f"gate expects width {sum(self.teacher_dims)}, got {concat_reps.shape[-1]}")
        return ad.softmax(self.lin2(ad.relu(self.lin1(concat_reps))), axis=-1)

    def weights_np(self, concat_reps: np.ndarray) -> np.ndarray:
        return self(Tensor(concat_reps.astype(np.float32))).data


class PredictionHeads(Module):
    """One linear map fuse_dim -> d_k per teacher."""

    def __init__(self, fuse_dim: int, teacher_dims: list[int], rngs: RngStreams, dtype=np.float32):
        super().__init__()
        self.fuse_dim = fuse_dim
        self.teacher_dims = list(teacher_dims)
        self.heads = [
            self.add_child(f"head{k}", Linear(fuse_dim, d, rngs.stream(f"init/head{k}"), dtype))
            for k, d in enumerate(teacher_dims)
        ]


class ProjectionHead(Module):
    """Single linear map from student width to the fused-teacher width."""

    def __init__(self, d_model: int, fuse_dim: int, rngs: RngStreams, dtype=np.float32):
        super().__init__()
        self.proj = self.add_child("proj", Linear(d_model, fuse_dim, rngs.stream("init/proj"), dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(x)


@dataclass
class FusedRep:
    vec: np.ndarray        # (fuse_dim,)
    weights: np.ndarray    # (K,)


def gate_forward(gate: GateNetwork, reps: list[np.ndarray]) -> np.ndarray:
    """Weights for one sample's rep list (registry order)."""
    if len(reps) != gate.n_teachers:
        raise ValueError(f"expected {gate.n_teachers} reps, got {len(reps)}")
    for r, d in zip(reps, gate.teacher_dims):
        if r.shape != (d,):
            raise ValueError(f"rep shape {r.shape} != ({d},)")
    return gate.weights_np(np.concatenate(reps)[None, :])[0]


def fuse(reps: list[np.ndarray], weights: np.ndarray) -> FusedRep:
    """Weighted sum of equal-width teacher reps."""
    dims = {r.shape for r in reps}
    if len(dims) != 1:
        raise ValueError(f"fusion requires equal dims, got {sorted(dims)}")
    vec = np.zeros_like(reps[0], dtype=np.float64)
    for w, r in zip(weights, reps):
        vec += float(w) * r.astype(np.float64)
    return FusedRep(vec=vec.astype(reps[0].dtype), weights=np.asarray(weights).copy())


# -- cache plumbing ----------------------------------------------------------------


@dataclass
class TeacherBank:
    """Registry-ordered cache bundle with optional fixed aligners to fuse_dim."""

    names: list[str]
    dims: list[int]
    fuse_dim: int
    clean: np.ndarray      # (N, K, fuse_dim) aligned
    masked: np.ndarray     # (N, K, fuse_dim) aligned
    clean_raw: list[np.ndarray]    # per-teacher (N, d_k)
    masked_raw: list[np.ndarray]   # per-teacher (N, d_k)
    sample_ids: list[str]

    @property
    def n_teachers(self) -> int:
        return len(self.names)

    def gate_input(self, masked: bool = True) -> np.ndarray:
        mats = self.masked_raw if masked else self.clean_raw
        return np.concatenate(mats, axis=1)


def build_bank(caches: dict[str, tuple[RepCache, RepCache]], sample_ids: list[str],
               aligners: dict[str, np.ndarray] | None = None) -> TeacherBank:
    """Assemble (clean, masked) matrices in registry order over `sample_ids`.

    `caches` maps teacher name -> (unmasked cache, masked cache). Teachers
    with dims differing from fuse_dim must appear in `aligners`.
    """
    names = list(caches)
    dims = []
    clean_raw, masked_raw = [], []
    for name in names:
        cc, mc = caches[name]
        if cc.masked or not mc.masked:
            raise ValueError(f"{name}: caches must be (unmasked, masked)")
        if cc.dim != mc.dim:
            raise ValueError(f"{name}: cache dims differ: {cc.dim} vs {mc.dim}")
        missing = [s for s in sample_ids if s not in cc.vectors or s not in mc.vectors]
        if missing:
            raise ValueError(f"{name}: caches missing samples {missing[:3]}...")
        dims.append(cc.dim)
        clean_raw.append(cc.matrix(sample_ids))
        masked_raw.append(mc.matrix(sample_ids))

    aligners = aligners or {}
    fuse_dims = {aligners[n].shape[1] if n in aligners else d for n, d in zip(names, dims)}
    if len(fuse_dims) != 1:
        raise ValueError(f"fusion dimension mismatch across teachers: {sorted(fuse_dims)}")
    fuse_dim = fuse_dims.pop()

    def aligned(mats):
        cols = []
        for name, d, m in zip(names, dims, mats):
            cols.append(m @ aligners[name] if name in aligners else m)
        return np.stack(cols, axis=1).astype(np.float32)

    return TeacherBank(names=names, dims=dims, fuse_dim=fuse_dim,
                       clean=aligned(clean_raw), masked=aligned(masked_raw),
                       clean_raw=clean_raw, masked_raw=masked_raw,
                       sample_ids=list(sample_ids))


# -- stage 1 -----------------------------------------------------------------------


@dataclass
class Stage1Config:
    epochs: int | None = None          # None -> 1 above 10k samples, else 5
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 5e-2
    clip_norm: float = 1.0
    seed: int = 0

    def resolve_epochs(self, n_samples: int) -> int:
        if self.epochs is not None:
            return self.epochs
        return 1 if n_samples >= 10_000 else 5


@dataclass
class WeightReport:
    teachers: list[str]
    mean: np.ndarray                  # (K,)
    per_sample: np.ndarray            # (N, K)
    histogram: np.ndarray = field(default=None)   # (K, 10) counts over [0,1]
    bin_edges: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.histogram is None:
            edges = np.linspace(0.0, 1.0, 11)
            self.histogram = np.stack([
                np.histogram(self.per_sample[:, k], bins=edges)[0]
                for k in range(len(self.teachers))
            ])
            self.bin_edges = edges


def denoise_loss(gate: GateNetwork, heads: PredictionHeads,
                 masked_aligned: np.ndarray, masked_concat: np.ndarray,
                 clean_raw: list[np.ndarray]) -> Tensor:
    """Batch-mean of sum_k ||p_k(fused(masked)) - clean_k||^2."""
    B = masked_aligned.shape[0]
    w = gate(Tensor(masked_concat))                        # (B, K)
    reps = Tensor(masked_aligned)                          # (B, K, fuse_dim), constant
    fused = ad.sum_(ad.mul(ad.reshape(w, (B, gate.n_teachers, 1)), reps), axis=1)
    total = None
    for k, head in enumerate(heads.heads):
        err = ad.add(head(fused), Tensor(-clean_raw[k]))
        sq = ad.sum_(ad.mul(err, err), axis=-1)            # (B,)
        total = sq if total is None else ad.add(total, sq)
    return ad.mean(total)


def train_gate(bank: TeacherBank, cfg: Stage1Config,
               gate: GateNetwork | None = None,
               heads: PredictionHeads | None = None):
    """Joint AdamW over gate and heads; returns (gate, heads, report, trace)."""
    rngs = RngStreams(cfg.seed)
    if gate is None:
        gate = GateNetwork(bank.dims, hidden=bank.fuse_dim, rngs=rngs.child("gate"))
    if heads is None:
        heads = PredictionHeads(bank.fuse_dim, bank.dims, rngs=rngs.child("heads"))

    n = len(bank.sample_ids)
    epochs = cfg.resolve_epochs(n)
    params = {**{"gate." + k: v for k, v in gate.named_parameters().items()},
              **{"heads." + k: v for k, v in heads.named_parameters().items()}}
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    opt_cfg = OptimizerConfig(lr_max=cfg.lr, lr_min=cfg.lr * 1e-2, weight_decay=cfg.weight_decay,
                              clip_norm=cfg.clip_norm, total_steps=epochs * steps_per_epoch)
    opt = AdamW(params, opt_cfg)

    masked_concat = bank.gate_input(masked=True)
    trace: list[tuple[int, float, float]] = []
    step = 0
    for epoch in range(epochs):
        order = rngs.stream(f"stage1/order/{epoch}").permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = denoise_loss(gate, heads, bank.masked[idx], masked_concat[idx],
                                [c[idx] for c in bank.clean_raw])
            if not np.isfinite(loss.data):
                raise NumericalError("stage 1 loss is non-finite", step=step)
            opt.zero_grad()
            loss.backward()
            opt.clip()
            opt.step(cfg.lr)
            trace.append((step, cfg.lr, float(loss.data)))
            step += 1

    report = mean_gate_weights(bank, gate)
    return gate, heads, report, trace


def mean_gate_weights(bank: TeacherBank, gate: GateNetwork) -> WeightReport:
    """Dataset-mean gate weights on unmasked reps (the stage-2 weighting)."""
    per_sample = gate.weights_np(bank.gate_input(masked=False))
    return WeightReport(teachers=list(bank.names), mean=per_sample.mean(axis=0),
                        per_sample=per_sample)


def save_gate(path: str, gate: GateNetwork, heads: PredictionHeads) -> bytes:
    config: dict[str, int | float] = {
        "n_teachers": gate.n_teachers,
        "fuse_dim": heads.fuse_dim,
        "hidden": gate.hidden,
    }
    for k, d in enumerate(gate.teacher_dims):
        config[f"dim{k}"] = d
    params = {**{"gate." + k: v for k, v in gate.state().items()},
              **{"heads." + k: v for k, v in heads.state().items()}}
    return write_checkpoint(path, GATE_MAGIC, config, params)


def load_gate(path: str) -> tuple[GateNetwork, PredictionHeads]:
    config, params = read_checkpoint(path, GATE_MAGIC)
    k = int(config["n_teachers"])
    dims = [int(config[f"dim{i}"]) for i in range(k)]
    gate = GateNetwork(dims, hidden=int(config["hidden"]), rngs=RngStreams(0))
    heads = PredictionHeads(int(config["fuse_dim"]), dims, rngs=RngStreams(0))
    gate.load_state({n[len("gate."):]: v for n, v in params.items() if n.startswith("gate.")})
    heads.load_state({n[len("heads."):]: v for n, v in params.items() if n.startswith("heads.")})
    return gate, heads


# -- stage 2 -----------------------------------------------------------------------


@dataclass
class Stage2Config:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 5e-4
    lr_min: float = 1e-5
    weight_decay: float = 5e-2
    clip_norm: float = 1.0
    eval_every: int = 50
    stop_similarity: float = 0.97     # early stop once held-out cosine reaches this
    seed: int = 0


def distill_loss(proj: ProjectionHead, student_vec: Tensor, fused: np.ndarray) -> Tensor:
    """1 - cos(projected student vector, fused target), batch mean."""
    return ad.cosine_embedding_loss(proj(student_vec), Tensor(fused.astype(np.float32)))


def fused_targets(bank: TeacherBank, gate: GateNetwork) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample weights from unmasked reps and the weighted-sum targets."""
    weights = gate.weights_np(bank.gate_input(masked=False))           # (N, K)
    targets = np.einsum("nk,nkd->nd", weights, bank.clean).astype(np.float32)
    norms = np.linalg.norm(targets, axis=1)
    if np.any(norms == 0.0):
        raise NumericalError("fused target has zero norm (degenerate teachers)")
    return targets, weights


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return (a * b).sum(axis=1) / (na * nb)


@dataclass
class Stage2Result:
    encoder: StudentEncoder
    proj: ProjectionHead
    trace: list[tuple[int, float, float]]       # (step, lr, loss)
    holdout_similarity: float
    steps_run: int


def train_student(store: SegmentStore, bank: TeacherBank, gate: GateNetwork,
                  student_cfg: StudentConfig, cfg: Stage2Config,
                  train_ids: list[str], holdout_ids: list[str]) -> Stage2Result:
    """Distill the frozen-gate fusion into the student; gate gets no optimizer."""
    gate.set_requires_grad(False)
    targets, _ = fused_targets(bank, gate)
    pos = {sid: i for i, sid in enumerate(bank.sample_ids)}
    x_all = store.stacked()
    store_pos = {sid: i for i, sid in enumerate(store.sample_ids)}

    def gather(ids):
        xi = np.array([store_pos[s] for s in ids])
        ti = np.array([pos[s] for s in ids])
        return x_all[xi], targets[ti]

    x_train, t_train = gather(train_ids)
    x_hold, t_hold = gather(holdout_ids)

    rngs = RngStreams(cfg.seed)
    encoder = StudentEncoder(student_cfg, rngs.child("student"))
    proj = ProjectionHead(student_cfg.d_model, bank.fuse_dim, rngs.child("proj"))
    params = {**{"student." + k: v for k, v in encoder.named_parameters().items()},
              **{"proj." + k: v for k, v in proj.named_parameters().items()}}
    opt_cfg = OptimizerConfig(lr_max=cfg.lr, lr_min=cfg.lr_min, weight_decay=cfg.weight_decay,
                              clip_norm=cfg.clip_norm, total_steps=cfg.steps)
    opt = AdamW(params, opt_cfg)

    def holdout_similarity() -> float:
        feats = encoder.features(x_hold)
        projected = feats @ proj.proj.w.data + proj.proj.b.data
        return float(cosine_rows(projected, t_hold).mean())

    n = len(x_train)
    trace: list[tuple[int, float, float]] = []
    order = rngs.stream("stage2/order/0").permutation(n)
    cursor, epoch = 0, 0
    sim = holdout_similarity()
    step = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > n:
            epoch += 1
            order = rngs.stream(f"stage2/order/{epoch}").permutation(n)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size

        lr = cosine_annealing_lr(step, opt_cfg)
        xb = Tensor(x_train[idx])
        pooled = encoder(xb)
        loss = distill_loss(proj, pooled, t_train[idx])
        if not np.isfinite(loss.data):
            raise NumericalError("stage 2 loss is non-finite", step=step)
        opt.zero_grad()
        loss.backward()
        opt.clip()
        opt.step(lr)
        trace.append((step, lr, float(loss.data)))

        if (step + 1) % cfg.eval_every == 0:
            sim = holdout_similarity()
            if sim >= cfg.stop_similarity:
                break

    sim = holdout_similarity()
    return Stage2Result(encoder=encoder, proj=proj, trace=trace,
                        holdout_similarity=sim, steps_run=len(trace))


def write_trace(path: str, trace: list[tuple[int, float, float]]) -> None:
    with open(path, "w") as f:
        f.write("step,lr,loss\n")
        for step, lr, loss in trace:
            f.write(f"{step},{lr:.10g},{loss:.10g}\n")


def smoothed(values: list[float], window: int = 20) -> np.ndarray:
    """Trailing moving average with the given window."""
    out = np.empty(len(values))
    arr = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(arr)])
    for i in range(len(arr)):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
