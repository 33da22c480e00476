"""Differentiable tensor kernels.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(N, C, H, W).  Every differentiable kernel ``f`` comes with a ``f_vjp``
that takes the same inputs plus an output cotangent and returns the input
cotangents.  Kernels never mutate their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

Pair = Tuple[int, int]


def _pair(v) -> Pair:
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate rank and finiteness; returns an ndarray view when possible."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvSpec:
    """Static description of a 2-D convolution plus its parameters.

    ``weight`` has shape (out, in/groups, kh, kw); ``bias`` is optional.
    """

    in_channels: int
    out_channels: int
    kernel: Pair = (3, 3)
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    groups: int = 1
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.kernel = _pair(self.kernel)
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.groups < 1:
            raise ShapeError("groups must be >= 1")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )
        if self.kernel[0] * self.kernel[1] < 1 or min(self.kernel) < 1:
            raise ShapeError(f"invalid kernel {self.kernel}")
        if min(self.stride) < 1:
            raise ShapeError(f"invalid stride {self.stride}")
        if min(self.padding) < 0:
            raise ShapeError(f"invalid padding {self.padding}")
        if self.weight is not None and tuple(self.weight.shape) != self.weight_shape:
            raise ShapeError(f"weight shape {self.weight.shape} != {self.weight_shape}")
        if self.bias is not None and tuple(np.shape(self.bias)) != (self.out_channels,):
            raise ShapeError(f"bias shape {np.shape(self.bias)} != ({self.out_channels},)")

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_hw(self, h: int, w: int) -> Pair:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        if h + 2 * ph - kh < 0 or w + 2 * pw - kw < 0:
            raise ShapeError(f"kernel {self.kernel} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
        return ((h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1)

    def output_shape(self, shape) -> Tuple[int, int, int, int]:
        n, c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"input has {c} channels, conv expects {self.in_channels}")
        return (n, self.out_channels, *self.output_hw(h, w))

    def macs(self, shape) -> int:
        n, _, ho, wo = self.output_shape(shape)
        kh, kw = self.kernel
        return n * self.out_channels * (self.in_channels // self.groups) * kh * kw * ho * wo

    def param_count(self, bias: Optional[bool] = None) -> int:
        has_bias = (self.bias is not None) if bias is None else bias
        return int(np.prod(self.weight_shape)) + (self.out_channels if has_bias else 0)


def _conv_windows(x: np.ndarray, spec: ConvSpec):
    n, c, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    g = spec.groups
    return win.reshape(n, g, c // g, ho, wo, kh, kw), xp.shape, (ho, wo)


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Zero-padded grouped cross-correlation (no kernel flip)."""
    x = as_tensor(x)
    spec.output_shape(x.shape)
    if spec.weight is None:
        raise ShapeError("conv2d requires weights")
    win, _, (ho, wo) = _conv_windows(x, spec)
    g = spec.groups
    wr = spec.weight.reshape(g, spec.out_channels // g, *spec.weight.shape[1:])
    y = np.einsum("ngchwij,gocij->ngohw", win, wr, optimize=True)
    y = y.reshape(x.shape[0], spec.out_channels, ho, wo)
    if spec.bias is not None:
        y = y + spec.bias.reshape(1, -1, 1, 1)
    return y.astype(x.dtype, copy=False)


def conv2d_vjp(x: np.ndarray, spec: ConvSpec, gy: np.ndarray):
    """Return (gx, gweight, gbias); gbias is None when the conv has no bias."""
    n, c, h, w = x.shape
    win, padded_shape, (ho, wo) = _conv_windows(x, spec)
    g = spec.groups
    og = spec.out_channels // g
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    gyr = gy.reshape(n, g, og, ho, wo)
    wr = spec.weight.reshape(g, og, *spec.weight.shape[1:])
    gw = np.einsum("ngchwij,ngohw->gocij", win, gyr, optimize=True).reshape(spec.weight.shape)
    gcols = np.einsum("gocij,ngohw->ngchwij", wr, gyr, optimize=True).reshape(n, c, ho, wo, kh, kw)
    gxp = np.zeros(padded_shape, dtype=np.result_type(x, gy))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[..., i, j]
    gx = gxp[:, :, ph : ph + h, pw : pw + w]
    gb = gy.sum(axis=(0, 2, 3)) if spec.bias is not None else None
    return gx, gw, gb


# ---------------------------------------------------------------------------
# Normalization, activations, pooling
# ---------------------------------------------------------------------------


def _group_stats(x: np.ndarray, groups: int, eps: float):
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"{c} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xg = x.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = ((xg - mean) ** 2).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv_std).reshape(x.shape)
    return xhat, inv_std


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Per-sample group normalization followed by a per-channel affine map."""
    x = as_tensor(x)
    xhat, _ = _group_stats(x, groups, eps)
    c = x.shape[1]
    return (xhat * np.reshape(gamma, (1, c, 1, 1)) + np.reshape(beta, (1, c, 1, 1))).astype(x.dtype, copy=False)


def group_norm_vjp(x, groups: int, gamma, eps: float, gy):
    """Return (gx, ggamma, gbeta)."""
    n, c, h, w = x.shape
    xhat, inv_std = _group_stats(x, groups, eps)
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    gxhat = (gy * np.reshape(gamma, (1, c, 1, 1))).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    gx = inv_std * (gxhat - gxhat.mean(axis=2, keepdims=True) - xh * (gxhat * xh).mean(axis=2, keepdims=True))
    return gx.reshape(x.shape), ggamma, gbeta


def sigmoid(x) -> np.ndarray:
    """Logistic function, clipped so results stay strictly inside (0, 1)."""
    x = np.asarray(x)
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    x = x.astype(dt, copy=False)
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dt, copy=False)
    return np.clip(s, np.finfo(dt).tiny, np.nextafter(dt.type(1), dt.type(0)))


def activation(x, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0).astype(np.asarray(x).dtype, copy=False)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_vjp(x, kind: str, gy) -> np.ndarray:
    if kind == "relu":
        return gy * (np.asarray(x) > 0)
    if kind == "sigmoid":
        s = sigmoid(x)
        return gy * s * (1 - s)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; a 1-D input is treated as one distribution."""
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty sequence")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(p: np.ndarray, gp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Cotangent of the softmax input given its output ``p``."""
    return p * (gp - (gp * p).sum(axis=axis, keepdims=True))


def _pool_spec(channels: int, kernel, stride, padding, dtype) -> ConvSpec:
    kh, kw = _pair(kernel)
    w = np.full((channels, 1, kh, kw), 1.0 / (kh * kw), dtype=dtype)
    return ConvSpec(channels, channels, (kh, kw), stride, padding, groups=channels, weight=w)


def avg_pool2d(x, kernel, stride=None, padding=(0, 0)) -> np.ndarray:
    """Window mean over the zero-padded input, divisor kh*kw (pads counted)."""
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    return conv2d(x, _pool_spec(x.shape[1], kernel, stride, padding, x.dtype))


def avg_pool2d_vjp(x, kernel, stride, padding, gy) -> np.ndarray:
    stride = kernel if stride is None else stride
    gx, _, _ = conv2d_vjp(x, _pool_spec(x.shape[1], kernel, stride, padding, x.dtype), gy)
    return gx


def global_avg_pool(x) -> np.ndarray:
    """(N, C, H, W) -> (N, C)."""
    return np.asarray(x).mean(axis=(2, 3))


def upsample_nearest2x(x) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample_nearest2x_vjp(gy) -> np.ndarray:
    n, c, h, w = gy.shape
    return gy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# Selection, channel plumbing, attention
# ---------------------------------------------------------------------------


def top_k(scores: Sequence[float], k: int) -> np.ndarray:
    """Indices of the k largest scores (ties: smaller index first), ascending."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not 1 <= k <= s.size:
        raise ValueError(f"k={k} out of range for {s.size} scores")
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:k])


def tensor_concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate rank-4 tensors along the channel axis."""
    if not parts:
        raise ShapeError("nothing to concatenate")
    ref = parts[0].shape
    for p in parts:
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"cannot concat shapes {ref} and {p.shape}")
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=1)


def tensor_split(x: np.ndarray, sizes: Sequence[int]):
    """Split channels into contiguous ranges of the given sizes."""
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.shape[1] or any(s < 0 for s in sizes):
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(x[:, start : start + s])
        start += s
    return out


def scaled_dot_attention(q, k, v) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v over the last two axes (leading axes batch)."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or k.shape[-2] < 1:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape} incompatible")
    d = q.shape[-1]
    p = softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(d), axis=-1)
    return p @ v


def scaled_dot_attention_vjp(q, k, v, gout):
    """Return (gq, gk, gv)."""
    d = q.shape[-1]
    scale = 1.0 / np.sqrt(d)
    p = softmax(q @ np.swapaxes(k, -1, -2) * scale, axis=-1)
    gv = np.swapaxes(p, -1, -2) @ gout
    gp = gout @ np.swapaxes(v, -1, -2)
    gs = softmax_vjp(p, gp) * scale
    gq = gs @ k
    gk = np.swapaxes(gs, -1, -2) @ q
    return gq, gk, gv


def attention_macs(n_queries: int, n_keys: int, d: int) -> int:
    """Score and weighted-sum products: 2 * Mq * Mk * d."""
    return 2 * n_queries * n_keys * d


def to_tokens(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, H*W, C)."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def from_tokens(t: np.ndarray, h: int, w: int) -> np.ndarray:
    n, _, c = t.shape
    return t.transpose(0, 2, 1).reshape(n, c, h, w)
