"""Differentiable layer primitives with hand-written backward passes.

Convolution is cross-correlation (no kernel flip) with stride 1 and "same"
padding. Backward functions take the forward inputs plus the upstream
gradient and return an :class:`OpGrad`.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor import ShapeError, as_tensor4


class PaddingMode(str, Enum):
    ZERO = "zero"
    REPLICATE = "replicate"


class Activation(str, Enum):
    SILU = "silu"
    LEAKY_RELU = "leaky_relu"


LEAKY_SLOPE = 0.05


@dataclass
class ConvKernel:
    weight: np.ndarray  # (out_c, in_c, k, k)
    bias: np.ndarray  # (out_c,)

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ShapeError(f"conv weight must be (out, in, k, k) with odd k, got {w.shape}")
        b = np.asarray(self.bias)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        self.weight, self.bias = w, b

    @property
    def out_c(self) -> int:
        return self.weight.shape[0]

    @property
    def in_c(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.shape[2]

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class OpGrad:
    d_input: np.ndarray
    d_weight: np.ndarray | None = None
    d_bias: np.ndarray | None = None


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pad(x: np.ndarray, p: int, mode: PaddingMode) -> np.ndarray:
    if p == 0:
        return x
    np_mode = "constant" if PaddingMode(mode) is PaddingMode.ZERO else "edge"
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode=np_mode)


def _unpad_grad(dxp: np.ndarray, p: int, mode: PaddingMode) -> np.ndarray:
    """Adjoint of :func:`_pad`."""
    if p == 0:
        return dxp
    h, w = dxp.shape[2] - 2 * p, dxp.shape[3] - 2 * p
    if PaddingMode(mode) is PaddingMode.ZERO:
        return dxp[:, :, p:p + h, p:p + w].copy()
    rows = np.clip(np.arange(-p, h + p), 0, h - 1)
    cols = np.clip(np.arange(-p, w + p), 0, w - 1)
    folded = np.zeros(dxp.shape[:2] + (h, dxp.shape[3]), dtype=dxp.dtype)
    np.add.at(folded, (slice(None), slice(None), rows), dxp)
    out = np.zeros(dxp.shape[:2] + (h, w), dtype=dxp.dtype)
    np.add.at(out, (slice(None), slice(None), slice(None), cols), folded)
    return out


def _check_conv(x: np.ndarray, k: ConvKernel, pad: int | None) -> int:
    if x.shape[1] != k.in_c:
        raise ShapeError(f"conv: input has {x.shape[1]} channels, kernel expects {k.in_c}")
    same = (k.size - 1) // 2
    if pad is None:
        return same
    if pad != same:
        raise ValueError(f"only same padding ({same}) is supported for a {k.size}x{k.size} kernel")
    return pad


def _im2col(x: np.ndarray, k: int, pad: int, padding: PaddingMode) -> np.ndarray:
    """Channel-major patch matrix of shape (C*k*k, N*H*W)."""
    n, c, h, w = x.shape
    xp = _pad(x, pad, padding).transpose(1, 0, 2, 3)
    cols = np.empty((c, k * k, n, h, w), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, di * k + dj] = xp[:, :, di:di + h, dj:dj + w]
    return cols.reshape(c * k * k, n * h * w)


def _to_channel_major(t: np.ndarray) -> np.ndarray:
    n, c, h, w = t.shape
    return np.ascontiguousarray(t.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def _from_channel_major(t: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    c = t.shape[0]
    return np.ascontiguousarray(t.reshape(c, n, h, w).transpose(1, 0, 2, 3))


def conv2d_forward(x, k: ConvKernel, pad: int | None = None,
                   padding: PaddingMode = PaddingMode.ZERO, cache: dict | None = None) -> np.ndarray:
    """Same-padded convolution via im2col and one matrix product.

    When ``cache`` is a dict the patch matrix is stored in it under
    ``"cols"`` so :func:`conv2d_backward` can skip rebuilding it.
    """
    x = as_tensor4(x)
    pad = _check_conv(x, k, pad)
    n, _, h, w = x.shape
    wt = k.weight.astype(x.dtype, copy=False).reshape(k.out_c, -1)
    if k.size == 1:
        cols = _to_channel_major(x)
    else:
        cols = _im2col(x, k.size, pad, padding)
    if cache is not None:
        cache["cols"] = cols
    out = wt @ cols
    out += k.bias.astype(x.dtype, copy=False)[:, None]
    return _from_channel_major(out, n, h, w)


def conv2d_forward_direct(x, k: ConvKernel, pad: int | None = None,
                          padding: PaddingMode = PaddingMode.ZERO) -> np.ndarray:
    """Reference path: one channel contraction per kernel tap, no im2col."""
    x = as_tensor4(x)
    pad = _check_conv(x, k, pad)
    n, _, h, w = x.shape
    xp = _pad(x, pad, padding)
    wt = k.weight.astype(x.dtype, copy=False)
    out = np.zeros((n, k.out_c, h, w), dtype=x.dtype)
    for di in range(k.size):
        for dj in range(k.size):
            out += np.einsum("oc,nchw->nohw", wt[:, :, di, dj], xp[:, :, di:di + h, dj:dj + w])
    out += k.bias.astype(x.dtype)[None, :, None, None]
    return out


def conv2d_backward(x, k: ConvKernel, d_out, pad: int | None = None,
                    padding: PaddingMode = PaddingMode.ZERO, cache: dict | None = None) -> OpGrad:
    x = as_tensor4(x)
    d_out = as_tensor4(d_out, dtype=x.dtype)
    pad = _check_conv(x, k, pad)
    n, _, h, w = x.shape
    if d_out.shape != (n, k.out_c, h, w):
        raise ShapeError(f"conv backward: d_out {d_out.shape} != {(n, k.out_c, h, w)}")
    wt = k.weight.astype(x.dtype, copy=False).reshape(k.out_c, -1)
    g = _to_channel_major(d_out)
    d_bias = g.sum(axis=1)
    ks = k.size
    if cache is not None and "cols" in cache:
        cols = cache["cols"]
    else:
        cols = _to_channel_major(x) if ks == 1 else _im2col(x, ks, pad, padding)
    d_weight = (g @ cols.T).reshape(k.weight.shape)
    d_cols = wt.T @ g
    if ks == 1:
        return OpGrad(_from_channel_major(d_cols, n, h, w), d_weight, d_bias)
    d_cols = d_cols.reshape(k.in_c, ks * ks, n, h, w)
    dxp = np.zeros((k.in_c, n, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    for di in range(ks):
        for dj in range(ks):
            dxp[:, :, di:di + h, dj:dj + w] += d_cols[:, di * ks + dj]
    d_input = _unpad_grad(dxp.transpose(1, 0, 2, 3), pad, padding)
    return OpGrad(np.ascontiguousarray(d_input), d_weight, d_bias)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def logistic(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and keeps logistic(x) - 0.5 exactly odd
    x = np.asarray(x)
    half = x.dtype.type(0.5)
    return half + half * np.tanh(half * x)


def act_silu(x) -> np.ndarray:
    x = as_tensor4(x)
    return x * logistic(x)


def act_silu_backward(x, d_out) -> OpGrad:
    x = as_tensor4(x)
    s = logistic(x)
    return OpGrad(d_out * (s * (1.0 + x * (1.0 - s))))


def act_leaky_relu(x) -> np.ndarray:
    x = as_tensor4(x)
    return np.where(x > 0, x, x * x.dtype.type(LEAKY_SLOPE))


def act_leaky_relu_backward(x, d_out) -> OpGrad:
    x = as_tensor4(x)
    return OpGrad(d_out * np.where(x > 0, 1.0, LEAKY_SLOPE).astype(x.dtype))


def activation(x, kind: Activation) -> np.ndarray:
    if Activation(kind) is Activation.SILU:
        return act_silu(x)
    return act_leaky_relu(x)


def activation_backward(x, d_out, kind: Activation) -> np.ndarray:
    if Activation(kind) is Activation.SILU:
        return act_silu_backward(x, d_out).d_input
    return act_leaky_relu_backward(x, d_out).d_input


def act_attention(x, a: float = 1.0, b: float = 1.0) -> np.ndarray:
    """Origin-symmetric attention map ``b * (logistic(a*x) - 0.5)``.

    Evaluated as ``b/2 * tanh(a*x/2)`` so the map is exactly odd.
    """
    x = np.asarray(x)
    t = x.dtype.type
    return t(b) * t(0.5) * np.tanh(t(0.5) * t(a) * x)


def attention_derivative(x, a: float = 1.0, b: float = 1.0) -> np.ndarray:
    x = np.asarray(x)
    t = x.dtype.type
    th = np.tanh(t(0.5) * t(a) * x)
    return t(a) * t(b) * t(0.25) * (t(1.0) - th * th)


def act_attention_backward(x, d_out, a: float = 1.0, b: float = 1.0) -> OpGrad:
    """Gradient w.r.t. the input; ``d_weight`` holds [d/da, d/db] summed."""
    x = np.asarray(x)
    t = x.dtype.type
    th = np.tanh(t(0.5) * t(a) * x)
    ds = t(0.25) * (t(1.0) - th * th)  # logistic'(a*x)
    d_input = d_out * (t(a) * t(b) * ds)
    d_a = np.sum(d_out * (t(b) * x * ds))
    d_b = np.sum(d_out * (t(0.5) * th))
    return OpGrad(d_input, d_weight=np.array([d_a, d_b], dtype=x.dtype))


# ---------------------------------------------------------------------------
# pixel shuffle
# ---------------------------------------------------------------------------


def pixel_shuffle(x, r: int) -> np.ndarray:
    x = as_tensor4(x)
    if r < 1:
        raise ValueError(f"shuffle factor must be >= 1, got {r}")
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    c_out = c // (r * r)
    y = x.reshape(n, c_out, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, c_out, h * r, w * r))


def pixel_unshuffle(y, r: int) -> np.ndarray:
    y = as_tensor4(y)
    if r < 1:
        raise ValueError(f"shuffle factor must be >= 1, got {r}")
    n, c, hr, wr = y.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial size {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    x = y.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(x.reshape(n, c * r * r, h, w))
