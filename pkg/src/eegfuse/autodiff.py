"""Reverse-mode automatic differentiation on numpy arrays.

A `Tensor` wraps an ndarray and records the op that produced it; calling
`backward()` on a scalar loss walks the tape in reverse topological order and
accumulates exact gradients into every reachable `requires_grad` leaf.

Training runs in float32; gradient verification builds the same graphs in
float64 (`Tensor` carries whatever dtype its array has, ops preserve it).
All ops are deterministic: fixed inputs give bit-identical outputs and grads.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray


def _as_array(x, dtype=None) -> Array:
    a = np.asarray(x)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    elif a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return a


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Node in the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = "leaf"):
        self.data = _as_array(data, dtype)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, grad={'set' if self.grad is not None else 'none'})"

    def _accum(self, g: Array):
        # grads are never mutated in place anywhere, so aliasing is safe
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def _lift(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(self._lift(other), -1.0))

    def __rsub__(self, other):
        return add(self._lift(other), mul_scalar(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _make(data: Array, parents: tuple, backward: Callable | None, op: str) -> Tensor:
    if not any(p.requires_grad for p in parents):
        backward = None
    return Tensor(data, _parents=tuple(p for p in parents if p.requires_grad),
                  _backward=backward, op=op)


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward, "div")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c

    def backward(g):
        a._accum(g * c)

    return _make(out_data, (a,), backward, "mul_scalar")


def add_scalar(a: Tensor, c: float) -> Tensor:
    out_data = a.data + c

    def backward(g):
        a._accum(g)

    return _make(out_data, (a,), backward, "add_scalar")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return _make(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return _make(out_data, (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accum(g * 0.5 / out_data)

    return _make(out_data, (a,), backward, "sqrt")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward, "tanh")


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accum(g * (a.data > 0))

    return _make(out_data, (a,), backward, "relu")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    pos = a.data > 0
    expm1 = np.expm1(np.minimum(a.data, 0.0))
    out_data = np.where(pos, a.data, alpha * expm1)

    def backward(g):
        a._accum(g * np.where(pos, 1.0, alpha * (expm1 + 1.0)))

    return _make(out_data, (a,), backward, "elu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU; the backward differentiates the approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    half_1pt = 0.5 * (1.0 + t)
    out_data = x * half_1pt
    deriv = half_1pt + (0.5 * _GELU_C) * x * (1.0 - t * t) * (1.0 + 0.134145 * x2)

    def backward(g):
        a._accum(g * deriv)

    return _make(out_data, (a,), backward, "gelu")


# -- reductions / shaping ----------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    return _make(out_data, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else (
        np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))
    return mul_scalar(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(out_data, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accum(np.transpose(g, inv))

    return _make(out_data, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward, "concat")


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, key) -> Tensor:
    out_data = a.data[key]
    basic = _is_basic_key(key)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] += g          # basic indexing never repeats elements
        else:
            np.add.at(full, key, g)
        a._accum(full)

    return _make(out_data, (a,), backward, "getitem")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError("matmul", f"inner extents differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            if b.data.ndim > 1:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            else:
                ga = np.multiply.outer(g, b.data)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.data.ndim > 1:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            else:
                gb = np.multiply.outer(a.data, g)
            b._accum(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b); w is (d_in, d_out). Leading axes flatten into one GEMM."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", f"input width {x.shape[-1]} != weight rows {w.shape[0]}")
    d_in, d_out = w.shape
    lead = x.shape[:-1]
    x2d = x.data.reshape(-1, d_in)
    out_data = x2d @ w.data
    if b is not None:
        out_data = out_data + b.data
    out_data = out_data.reshape(*lead, d_out)

    def backward(g):
        g2d = g.reshape(-1, d_out)
        if x.requires_grad:
            x._accum((g2d @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accum(x2d.T @ g2d)
        if b is not None and b.requires_grad:
            b._accum(g2d.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward, "linear")


# -- normalization / attention helpers ---------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; strictly positive, rows sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accum(out_data * (g - dot))

    return _make(out_data, (a,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out_data = gamma.data * xh + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xh).sum(axis=tuple(range(g.ndim - 1))))
        if beta.requires_grad:
            beta._accum(g.sum(axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xh).mean(axis=-1, keepdims=True)
            x._accum(inv * (gx - m1 - xh * m2))

    return _make(out_data, (x, gamma, beta), backward, "layer_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = 1.0 / (1.0 - p)
    mask = keep * scale
    out_data = x.data * mask

    def backward(g):
        x._accum(g * mask)

    return _make(out_data, (x,), backward, "dropout")


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor):
    """Attention over the second-to-last axis; returns (output, weights)."""
    dh = q.shape[-1]
    scores = mul_scalar(matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))),
                        1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


# -- convolutions ------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int) -> Tensor:
    """x: (B, Cin, L), w: (Cout, Cin, K), b: (Cout,) -> (B, Cout, L_out)."""
    B, cin, L = x.shape
    cout, cin_w, K = w.shape
    if cin != cin_w:
        raise ShapeError("conv1d", f"input channels {cin} != weight channels {cin_w}")
    L_out = (L + 2 * padding - K) // stride + 1
    if L_out < 1:
        raise ShapeError("conv1d", f"kernel {K} with stride {stride} does not fit length {L} (pad {padding})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    idx = np.arange(L_out)[:, None] * stride + np.arange(K)[None, :]
    # (B, L_out, Cin*K) patch matrix so forward/backward are plain matmuls
    cols = xp[:, :, idx].transpose(0, 2, 1, 3).reshape(B, L_out, cin * K)
    w_mat = w.data.reshape(cout, cin * K)
    out_data = np.matmul(cols, w_mat.T).transpose(0, 2, 1) + b.data[:, None]

    def backward(g):
        g_bl = g.transpose(0, 2, 1)                        # (B, L_out, Cout)
        if w.requires_grad:
            gw = np.matmul(g_bl.reshape(-1, cout).T, cols.reshape(-1, cin * K))
            w._accum(gw.reshape(cout, cin, K))
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(g_bl, w_mat).reshape(B, L_out, cin, K).transpose(0, 2, 1, 3)
            dxp = np.zeros_like(xp)
            for kk in range(K):
                dxp[:, :, kk + stride * np.arange(L_out)] += dcols[:, :, :, kk]
            x._accum(dxp[:, :, padding:padding + L] if padding else dxp)

    return _make(out_data, (x, w, b), backward, "conv1d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor, padding: tuple[int, int]) -> Tensor:
    """x: (B, D, H, W), w: (D, kh, kw), b: (D,); stride 1, one filter per channel."""
    B, D, H, W = x.shape
    Dw, kh, kw = w.shape
    if D != Dw:
        raise ShapeError("depthwise_conv2d", f"channels {D} != filters {Dw}")
    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    H_out, W_out = win.shape[2], win.shape[3]
    win_mat = np.ascontiguousarray(win).reshape(B, D, H_out, W_out, kh * kw)
    # broadcasted matmul: one (kh*kw,) filter per channel
    out_data = np.matmul(win_mat, w.data.reshape(1, D, 1, kh * kw, 1))[..., 0] \
        + b.data[None, :, None, None]

    def backward(g):
        if w.requires_grad:
            # one batched GEMV per channel: (D, kh*kw, BHW) @ (D, BHW, 1)
            wm = win_mat.transpose(1, 4, 0, 2, 3).reshape(D, kh * kw, -1)
            gm = g.transpose(1, 0, 2, 3).reshape(D, -1, 1)
            w._accum(np.matmul(wm, gm).reshape(D, kh, kw))
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + H_out, j:j + W_out] += g * w.data[None, :, i, j, None, None]
            x._accum(dxp[:, :, ph:ph + H, pw:pw + W])

    return _make(out_data, (x, w, b), backward, "depthwise_conv2d")


# -- losses ------------------------------------------------------------------

def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences."""
    if a.shape != b.shape:
        raise ShapeError("mse_loss", f"shapes differ: {a.shape} vs {b.shape}")
    d = add(a, mul_scalar(b, -1.0))
    return mean(mul(d, d))


def cosine_embedding_loss(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """1 - cos(a, b) for vectors, or the batch mean for (B, d) inputs.

    Raises NumericalError on a zero-norm input (collapsed representation).
    """
    from .errors import NumericalError

    if a.shape != b.shape:
        raise ShapeError("cosine_embedding_loss", f"shapes differ: {a.shape} vs {b.shape}")
    single = a.data.ndim == 1
    av = reshape(a, (1, -1)) if single else a
    bv = reshape(b, (1, -1)) if single else b
    na = np.sqrt((av.data * av.data).sum(axis=-1))
    nb = np.sqrt((bv.data * bv.data).sum(axis=-1))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise NumericalError("cosine_embedding_loss: zero-norm vector (collapsed representation)")
    dot = sum_(mul(av, bv), axis=-1)
    norm_a = sqrt(sum_(mul(av, av), axis=-1))
    norm_b = sqrt(sum_(mul(bv, bv), axis=-1))
    cos = div(dot, mul(norm_a, norm_b))
    return mean(add_scalar(mul_scalar(cos, -1.0), 1.0))


# -- non-differentiable front-end ---------------------------------------------

def rfft_magnitude(x: Array) -> Array:
    """One-sided real-DFT magnitudes of the last axis; length P//2 + 1.

    Front-end for raw signal; treated as a constant w.r.t. the tape
    (no parameter ever sits upstream of it).
    """
    if x.shape[-1] < 2:
        raise ShapeError("rfft_magnitude", f"patch length {x.shape[-1]} < 2")
    return np.abs(np.fft.rfft(x, axis=-1)).astype(x.dtype)


def forward_backward(fn: Callable[..., Tensor], inputs: Sequence[Tensor]):
    """Run `fn(*inputs)` to a scalar loss, backprop, return (loss, grads).

    Grads are returned in input order; inputs that do not require grad get
    None. All-finite outputs are asserted.
    """
    from .errors import NumericalError

    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("forward produced non-finite values")
    out.backward()
    grads = []
    for t in inputs:
        if t.requires_grad:
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise NumericalError("backward produced non-finite gradients")
            grads.append(t.grad if t.grad is not None else np.zeros_like(t.data))
        else:
            grads.append(None)
    return out, grads
