"""Central-difference verification of reverse-mode gradients.

Runs the model in float64; perturbs sampled parameter coordinates by eps and
compares (f(x+e) - f(x-e)) / 2e against the tape gradient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    rng: np.random.Generator, n_coords: int = 200,
                    eps: float = 1e-5) -> float:
    """Max relative error between tape grads and central differences.

    `loss_fn` must rebuild the graph from the *current* param values on every
    call (params are mutated in place during probing).
    """
    for p in params:
        p.zero_grad()
        assert p.data.dtype == np.float64, "gradcheck requires float64 parameters"
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    n = min(n_coords, total)
    picks = rng.choice(total, size=n, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat_idx in picks:
        pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        ci = int(flat_idx - offsets[pi])
        flat = params[pi].data.reshape(-1)
        orig = flat[ci]
        flat[ci] = orig + eps
        f_plus = float(loss_fn().data)
        flat[ci] = orig - eps
        f_minus = float(loss_fn().data)
        flat[ci] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, relative_error(fd, float(analytic[pi].reshape(-1)[ci])))
    return worst
