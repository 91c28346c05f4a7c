"""Downstream measurement: linear probing, fine-tuning, and the metric suite.

Binary tasks report balanced accuracy, AUC-PR, and AUROC; multiclass tasks
report balanced accuracy, Cohen's kappa, and weighted F1. Adaptation always
selects its checkpoint/hyperparameters on validation and reports on test.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SegmentStore, TaskSplit
from .errors import NumericalError
from .nn import Linear, Module
from .optim import AdamW, OptimizerConfig, cosine_annealing_lr
from .rng import RngStreams
from .student import StudentEncoder

# -- metrics ---------------------------------------------------------------------


def _as_int(y) -> np.ndarray:
    return np.asarray(y, dtype=np.int64)


def confusion_matrix(y_true, y_pred, n_classes: int | None = None) -> np.ndarray:
    t, p = _as_int(y_true), _as_int(y_pred)
    if len(t) != len(p):
        raise ValueError("y_true and y_pred lengths differ")
    k = n_classes or int(max(t.max(), p.max())) + 1
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over classes present in y_true."""
    m = confusion_matrix(y_true, y_pred)
    support = m.sum(axis=1)
    present = support > 0
    if not present.all():
        warnings.warn(f"classes {np.where(~present)[0].tolist()} absent from y_true; excluded")
    recalls = m.diagonal()[present] / support[present]
    return float(recalls.mean())


def cohen_kappa(y_true, y_pred) -> float:
    """(p_o - p_e) / (1 - p_e); defined as 0 when p_e == 1."""
    m = confusion_matrix(y_true, y_pred)
    n = m.sum()
    p_o = m.diagonal().sum() / n
    p_e = float((m.sum(axis=1) * m.sum(axis=0)).sum()) / (n * n)
    if p_e >= 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def weighted_f1(y_true, y_pred) -> float:
    """Support-weighted mean of per-class F1 (0 for empty classes)."""
    m = confusion_matrix(y_true, y_pred)
    support = m.sum(axis=1)
    predicted = m.sum(axis=0)
    tp = m.diagonal()
    f1 = np.zeros(len(m))
    denom = support + predicted
    ok = denom > 0
    f1[ok] = 2.0 * tp[ok] / denom[ok]
    total = support.sum()
    return float((f1 * support).sum() / total)


def auroc(y_true, scores) -> float:
    """P(random positive outscores random negative), ties at half credit."""
    t = _as_int(y_true)
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int((t == 1).sum())
    n_neg = int((t == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # average rank, 1-based
        i = j + 1
    pos_rank_sum = ranks[t == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pr(y_true, scores) -> float:
    """Average precision: step-wise integral of the PR curve over thresholds."""
    t = _as_int(y_true)
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int((t == 1).sum())
    if n_pos == 0 or n_pos == len(t):
        raise ValueError("AUC-PR needs both classes present")
    order = np.argsort(-s, kind="stable")
    t_sorted = t[order]
    s_sorted = s[order]
    tp = np.cumsum(t_sorted)
    k = np.arange(1, len(t) + 1)
    # thresholds at the last index of each tied-score group
    last_of_group = np.ones(len(s), dtype=bool)
    last_of_group[:-1] = s_sorted[1:] != s_sorted[:-1]
    precision = tp[last_of_group] / k[last_of_group]
    recall = tp[last_of_group] / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev) * precision).sum())


BINARY_METRICS = ("balanced_accuracy", "auc_pr", "auroc")
MULTICLASS_METRICS = ("balanced_accuracy", "cohen_kappa", "weighted_f1")


def metric_set(n_classes: int) -> tuple[str, ...]:
    return BINARY_METRICS if n_classes == 2 else MULTICLASS_METRICS


def compute_metrics(n_classes: int, y_true, y_pred, scores=None) -> dict[str, float]:
    out = {"balanced_accuracy": balanced_accuracy(y_true, y_pred)}
    if n_classes == 2:
        if scores is None:
            raise ValueError("binary metrics need positive-class scores")
        out["auc_pr"] = auc_pr(y_true, scores)
        out["auroc"] = auroc(y_true, scores)
    else:
        out["cohen_kappa"] = cohen_kappa(y_true, y_pred)
        out["weighted_f1"] = weighted_f1(y_true, y_pred)
    return out


# -- task plumbing -----------------------------------------------------------------


@dataclass
class TaskSpec:
    name: str
    store: SegmentStore
    split: TaskSplit

    def __post_init__(self):
        if self.store.labels is None:
            raise ValueError(f"task {self.name}: store has no labels")
        bad = [y for y in self.store.labels if y >= self.split.n_classes]
        if bad:
            raise ValueError(f"task {self.name}: labels exceed n_classes")

    @property
    def n_classes(self) -> int:
        return self.split.n_classes

    @property
    def metrics(self) -> tuple[str, ...]:
        return metric_set(self.n_classes)

    def indices(self, part: str) -> np.ndarray:
        ids = getattr(self.split, part)
        lookup = {sid: i for i, sid in enumerate(self.store.sample_ids)}
        return np.array([lookup[s] for s in ids], dtype=np.int64)


@dataclass
class AdaptationResult:
    head_params: dict[str, np.ndarray]
    val_scores: dict[str, float]
    test_scores: dict[str, float]
    chosen: dict


def extract_features(encoder: StudentEncoder, store: SegmentStore) -> np.ndarray:
    """Pooled vector per sample; deterministic, encoder untouched."""
    return encoder.features(store.stacked())


# -- linear probe --------------------------------------------------------------------


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def probe_loss_grad(W, b, X, Y_onehot, l2):
    n = len(X)
    p = softmax_rows(X @ W + b)
    eps = 1e-12
    nll = -np.log(np.clip((p * Y_onehot).sum(axis=1), eps, None)).mean()
    loss = nll + 0.5 * l2 * float((W * W).sum())
    d = (p - Y_onehot) / n
    return loss, X.T @ d + l2 * W, d.sum(axis=0)


def fit_logistic(X: np.ndarray, y: np.ndarray, n_classes: int, l2: float,
                 tol: float = 1e-6, max_iter: int = 5000):
    """Full-batch gradient descent with backtracking to grad-norm < tol."""
    if len(np.unique(y)) < 2:
        raise ValueError("training split contains a single class")
    X = np.asarray(X, dtype=np.float64)
    Y = np.eye(n_classes)[_as_int(y)]
    W = np.zeros((X.shape[1], n_classes))
    b = np.zeros(n_classes)
    step = 1.0
    loss, gW, gb = probe_loss_grad(W, b, X, Y, l2)
    for _ in range(max_iter):
        gnorm = np.sqrt((gW * gW).sum() + (gb * gb).sum())
        if gnorm < tol:
            break
        while True:
            W2, b2 = W - step * gW, b - step * gb
            loss2, gW2, gb2 = probe_loss_grad(W2, b2, X, Y, l2)
            if loss2 <= loss - 1e-4 * step * gnorm * gnorm:
                break
            step *= 0.5
            if step < 1e-12:
                break
        W, b, loss, gW, gb = W2, b2, loss2, gW2, gb2
        step = min(step * 2.0, 1e6)
    return W, b, loss


def probe_predict(W, b, X):
    p = softmax_rows(np.asarray(X, dtype=np.float64) @ W + b)
    return p.argmax(axis=1), p


def linear_probe(features: np.ndarray, labels: np.ndarray, task: TaskSpec,
                 l2: float = 1e-4) -> AdaptationResult:
    """Multinomial logistic regression on frozen features at one l2."""
    tr, va, te = task.indices("train"), task.indices("val"), task.indices("test")
    y = _as_int(labels)
    W, b, _ = fit_logistic(features[tr], y[tr], task.n_classes, l2)

    def score(idx):
        pred, p = probe_predict(W, b, features[idx])
        scores = p[:, 1] if task.n_classes == 2 else None
        return compute_metrics(task.n_classes, y[idx], pred, scores)

    return AdaptationResult(head_params={"W": W, "b": b},
                            val_scores=score(va), test_scores=score(te),
                            chosen={"l2": l2})


DEFAULT_L2_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


def probe_sweep(features: np.ndarray, labels: np.ndarray, task: TaskSpec,
                l2_grid=DEFAULT_L2_GRID) -> AdaptationResult:
    """Sweep the ridge strength on validation balanced accuracy."""
    best = None
    for l2 in l2_grid:
        res = linear_probe(features, labels, task, l2)
        key = res.val_scores["balanced_accuracy"]
        if best is None or key > best[0]:
            best = (key, res)
    return best[1]


# -- fine-tuning ---------------------------------------------------------------------


@dataclass
class FinetuneConfig:
    backbone_lrs: tuple[float, ...] = (5e-5, 1e-4, 5e-4)
    multi_lr: tuple[bool, ...] = (True, False)
    head_lr_factor: float = 5.0
    epochs: int = 50
    batch_size: int = 64
    dropout: float = 0.1
    weight_decay: float = 5e-2
    clip_norm: float = 1.0
    lr_min: float = 1e-6
    label_smoothing: float = 0.1
    seed: int = 0

    def grid(self) -> list[dict]:
        if not self.backbone_lrs or not self.multi_lr:
            raise ValueError("fine-tuning grid is empty")
        return [{"backbone_lr": lr, "multi_lr": m,
                 "head_lr": lr * (self.head_lr_factor if m else 1.0)}
                for lr in self.backbone_lrs for m in self.multi_lr]


class ClassifierHead(Module):
    """3-layer MLP with ELU and dropout over flattened token grids."""

    def __init__(self, in_dim: int, n_classes: int, d_model: int, rngs: RngStreams,
                 dropout: float = 0.1):
        super().__init__()
        self.dropout = dropout
        h1, h2 = 4 * d_model, d_model
        self.fc1 = self.add_child("fc1", Linear(in_dim, h1, rngs.stream("init/fc1")))
        self.fc2 = self.add_child("fc2", Linear(h1, h2, rngs.stream("init/fc2")))
        self.fc3 = self.add_child("fc3", Linear(h2, n_classes, rngs.stream("init/fc3")))

    def __call__(self, x: Tensor, rng=None, training: bool = False) -> Tensor:
        h = ad.elu(self.fc1(x))
        h = ad.dropout(h, self.dropout, rng, training)
        h = ad.elu(self.fc2(h))
        h = ad.dropout(h, self.dropout, rng, training)
        return self.fc3(h)


def cross_entropy(logits: Tensor, y: np.ndarray, n_classes: int,
                  label_smoothing: float = 0.0) -> Tensor:
    """Mean CE against (optionally smoothed) one-hot targets."""
    target = np.eye(n_classes, dtype=np.float32)[_as_int(y)]
    if label_smoothing > 0:
        target = (1.0 - label_smoothing) * target + label_smoothing / n_classes
    shifted = ad.add(logits, Tensor(-logits.data.max(axis=-1, keepdims=True)))
    log_z = ad.log(ad.sum_(ad.exp(shifted), axis=-1, keepdims=True))
    log_p = ad.add(shifted, ad.mul_scalar(log_z, -1.0))
    return ad.mul_scalar(ad.mean(ad.sum_(ad.mul(Tensor(target), log_p), axis=-1)), -1.0)


def _finetune_once(encoder: StudentEncoder, task: TaskSpec, cfg: FinetuneConfig,
                   choice: dict, run_seed: int) -> AdaptationResult:
    rngs = RngStreams(run_seed)
    scfg = encoder.cfg
    in_dim = scfg.channels * scfg.n_patches * scfg.d_model
    head = ClassifierHead(in_dim, task.n_classes, scfg.d_model, rngs.child("head"),
                          dropout=cfg.dropout)
    smoothing = cfg.label_smoothing if task.n_classes > 2 else 0.0

    params = {**{"backbone." + k: v for k, v in encoder.named_parameters().items()},
              **{"head." + k: v for k, v in head.named_parameters().items()}}
    lr_scale = {n: (choice["head_lr"] / choice["backbone_lr"]) for n in params if n.startswith("head.")}
    x_all = task.store.stacked()
    y_all = _as_int(task.store.labels)
    tr, va, te = task.indices("train"), task.indices("val"), task.indices("test")

    steps_per_epoch = max(1, (len(tr) + cfg.batch_size - 1) // cfg.batch_size)
    opt_cfg = OptimizerConfig(lr_max=choice["backbone_lr"], lr_min=cfg.lr_min,
                              weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm,
                              total_steps=cfg.epochs * steps_per_epoch)
    opt = AdamW(params, opt_cfg, lr_scale=lr_scale)
    drop_rng = rngs.stream("dropout")

    def predict(idx):
        grids = encoder.token_grids(x_all[idx])
        logits = head(Tensor(grids.reshape(len(idx), -1))).data
        p = softmax_rows(logits.astype(np.float64))
        return logits.argmax(axis=1), p

    def val_score(idx):
        pred, _ = predict(idx)
        return balanced_accuracy(y_all[idx], pred)

    best = (val_score(va), {n: p.data.copy() for n, p in params.items()})
    step = 0
    for epoch in range(cfg.epochs):
        order = rngs.stream(f"order/{epoch}").permutation(len(tr))
        for lo in range(0, len(tr), cfg.batch_size):
            idx = tr[order[lo:lo + cfg.batch_size]]
            grid = encoder.encode(Tensor(x_all[idx]), rng=drop_rng, training=True)
            flat = ad.reshape(grid, (len(idx), -1))
            logits = head(flat, rng=drop_rng, training=True)
            loss = cross_entropy(logits, y_all[idx], task.n_classes, smoothing)
            if not np.isfinite(loss.data):
                raise NumericalError("fine-tuning loss is non-finite", step=step)
            opt.zero_grad()
            loss.backward()
            opt.clip()
            opt.step(cosine_annealing_lr(step, opt_cfg))
            step += 1
        score = val_score(va)
        if score > best[0]:
            best = (score, {n: p.data.copy() for n, p in params.items()})

    for n, p in params.items():
        p.data = best[1][n]
    pred, prob = predict(te)
    scores = prob[:, 1] if task.n_classes == 2 else None
    test = compute_metrics(task.n_classes, y_all[te], pred, scores)
    return AdaptationResult(head_params=head.state(), val_scores={"balanced_accuracy": best[0]},
                            test_scores=test, chosen=dict(choice))


def finetune(encoder_ckpt: str, task: TaskSpec, cfg: FinetuneConfig) -> AdaptationResult:
    """Grid-search joint fine-tuning; each run starts from the checkpoint."""
    results = []
    for i, choice in enumerate(cfg.grid()):
        encoder = StudentEncoder.load(encoder_ckpt)
        res = _finetune_once(encoder, task, cfg, choice, run_seed=cfg.seed + i)
        results.append(res)
    best = max(results, key=lambda r: r.val_scores["balanced_accuracy"])
    return best


# -- harness --------------------------------------------------------------------------


def evaluate(encoder: StudentEncoder, tasks: list[TaskSpec], mode: str = "probe",
             seed: int = 0, encoder_ckpt: str | None = None,
             finetune_cfg: FinetuneConfig | None = None,
             l2_grid=DEFAULT_L2_GRID) -> dict:
    """Per-task metrics plus cross-task means; serializable report dict."""
    if mode not in ("probe", "finetune"):
        raise ValueError(f"unknown mode {mode!r}")
    report: dict = {"mode": mode, "seed": seed, "config": {}}
    per_task: dict[str, dict[str, float]] = {}
    for task in tasks:
        if mode == "probe":
            feats = extract_features(encoder, task.store)
            res = probe_sweep(feats, np.asarray(task.store.labels), task, l2_grid)
        else:
            if encoder_ckpt is None:
                raise ValueError("finetune mode needs encoder_ckpt")
            res = finetune(encoder_ckpt, task, finetune_cfg or FinetuneConfig(seed=seed))
        per_task[task.name] = {m: round(float(v), 6) for m, v in res.test_scores.items()}
        report["config"][task.name] = res.chosen
    report.update(per_task)
    all_metrics = sorted({m for scores in per_task.values() for m in scores})
    report["mean"] = {
        m: round(float(np.mean([s[m] for s in per_task.values() if m in s])), 6)
        for m in all_metrics
    }
    return report


def write_report(path: str, report: dict) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)


def read_report(path: str) -> dict:
    with open(path) as f:
        return json.load(f)
