"""Trainable layers on top of the autodiff tape.

Modules register parameters and children explicitly; `named_parameters`
yields a flat, deterministically ordered name -> Tensor map used by the
optimizer and the checkpoint container.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import kaiming_init


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def register(self, name: str, t: Tensor) -> Tensor:
        self._params[name] = t
        return t

    def add_child(self, name: str, m: "Module") -> "Module":
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for n, p in self._params.items():
            out[prefix + n] = p
        for cn, c in self._children.items():
            out.update(c.named_parameters(prefix + cn + "."))
        return out

    def set_requires_grad(self, flag: bool):
        for p in self.named_parameters().values():
            p.requires_grad = flag

    def param_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"parameter table mismatch: missing={missing}, extra={extra}")
        for n, p in params.items():
            if state[n].shape != p.data.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.data.shape}")
            p.data = state[n].astype(p.data.dtype, copy=True)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters().items()}


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.w = self.register("w", Tensor(kaiming_init((d_in, d_out), d_in, rng, dtype), requires_grad=True))
        self.b = self.register("b", Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.w = self.register("w", Tensor(
            kaiming_init((c_out, c_in, kernel), c_in * kernel, rng, dtype), requires_grad=True))
        self.b = self.register("b", Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.w, self.b, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: tuple[int, int], rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        kh, kw = kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"same-padding depthwise conv needs odd kernel, got {kernel}")
        self.padding = (kh // 2, kw // 2)
        self.w = self.register("w", Tensor(
            kaiming_init((channels, kh, kw), kh * kw, rng, dtype), requires_grad=True))
        self.b = self.register("b", Tensor(np.zeros(channels, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.depthwise_conv2d(x, self.w, self.b, self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        super().__init__()
        self.gamma = self.register("gamma", Tensor(np.ones(d, dtype=dtype), requires_grad=True))
        self.beta = self.register("beta", Tensor(np.zeros(d, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)
