"""AdamW with decoupled weight decay, cosine-annealing LR, global grad clipping.

Defaults follow the training recipe used throughout: betas (0.9, 0.999),
eps 1e-8, weight decay 5e-2, clip norm 1, cosine floor 1e-5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import NumericalError


@dataclass
class OptimizerConfig:
    lr_max: float = 5e-4
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-2
    clip_norm: float = 1.0
    total_steps: int = 1000

    def __post_init__(self):
        if not (0 < self.lr_min <= self.lr_max):
            raise ValueError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.clip_norm <= 0:
            raise ValueError("eps and clip_norm must be positive")


@dataclass
class ParamState:
    """Optimizer state for one parameter tensor."""

    value: Tensor
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value.data)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value.data)

    @property
    def grad(self):
        return self.value.grad


def adamw_step(state: ParamState, cfg: OptimizerConfig, lr: float) -> ParamState:
    """One bias-corrected Adam update plus a decoupled lr*wd*value decay term."""
    g = state.grad
    if g is None:
        raise NumericalError("adamw_step: gradient not populated", step=state.step_count)
    if not np.all(np.isfinite(g)):
        raise NumericalError("adamw_step: non-finite gradient", step=state.step_count)
    state.step_count += 1
    t = state.step_count
    state.adam_m = cfg.beta1 * state.adam_m + (1.0 - cfg.beta1) * g
    state.adam_v = cfg.beta2 * state.adam_v + (1.0 - cfg.beta2) * (g * g)
    m_hat = state.adam_m / (1.0 - cfg.beta1 ** t)
    v_hat = state.adam_v / (1.0 - cfg.beta2 ** t)
    update = lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    decay = lr * cfg.weight_decay * state.value.data
    state.value.data = (state.value.data - update - decay).astype(state.value.data.dtype, copy=False)
    return state


def cosine_annealing_lr(step: int, cfg: OptimizerConfig) -> float:
    """lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi step / total)); clamps past the end."""
    if step >= cfg.total_steps:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * step / cfg.total_steps))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all grads by max_norm/||g|| when the global L2 norm exceeds max_norm.

    Returns (grads, pre-clip norm). Never mutates the inputs.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return [g * scale for g in grads], total


def kaiming_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """He-normal entries with std sqrt(2/fan_in); reproducible from the stream."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class AdamW:
    """Optimizer over named parameters; supports per-group LR multipliers."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig,
                 lr_scale: dict[str, float] | None = None):
        self.cfg = cfg
        self.names = list(params)
        self.states = {n: ParamState(value=p) for n, p in params.items()}
        self.lr_scale = lr_scale or {}
        self.step_count = 0

    def zero_grad(self):
        for st in self.states.values():
            st.value.zero_grad()

    def clip(self):
        live = [n for n in self.names if self.states[n].grad is not None]
        grads, norm = clip_grad_norm([self.states[n].grad for n in live], self.cfg.clip_norm)
        for n, g in zip(live, grads):
            self.states[n].value.grad = g
        return norm

    def step(self, lr: float):
        self.step_count += 1
        for n in self.names:
            st = self.states[n]
            if st.grad is None:
                continue
            adamw_step(st, self.cfg, lr * self.lr_scale.get(n, 1.0))
