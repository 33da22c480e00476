"""Light-weight grouped attention.

The channel axis is cut into four quarters, each handled by a different
branch (gate point, regular local, sparse medium-range, sparse global).
Branch outputs are scaled by softmax-normalized fusion weights,
concatenated and mixed by a pointwise conv.  The two attention branches
attend from every token to a fixed-size key set, so their cost grows
linearly with the token count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .module import (Activation, Conv2d, LayerRecord, Module, ParamSpec, check_channels,
                     prefixed, sub)


def default_sma_samples(tokens: int) -> int:
    return min(64, tokens)


def default_sga_k(tokens: int) -> int:
    return min(64, math.ceil(tokens / 4))


def sma_indices(tokens: int, samples: int) -> np.ndarray:
    """Row-major uniform grid of ``samples`` token indices, stride tokens // samples."""
    if not 1 <= samples <= tokens:
        raise ShapeError(f"sma samples M={samples} must lie in [1, {tokens}]")
    return np.arange(samples) * (tokens // samples)


def lwga_attention_macs(tokens: int, d: int, samples: int, k: int, batch: int = 1) -> int:
    """Attention MACs of the SMA and SGA branches: 2*N*M*d + 2*N*K*d."""
    return batch * (T.attention_macs(tokens, samples, d) + T.attention_macs(tokens, k, d))


@dataclass
class LwgaConfig:
    """``None`` for samples / k means derive from the token count at call time."""

    sma_samples: Optional[int] = None
    sga_k: Optional[int] = None

    def __post_init__(self):
        for name in ("sma_samples", "sga_k"):
            v = getattr(self, name)
            if v is not None and int(v) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self):
        return {"sma_samples": self.sma_samples, "sga_k": self.sga_k}


class GatePointAttention(Module):
    kind = "gpa"

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.pw = self.add("pw", Conv2d(channels, channels, 1))

    def forward(self, x, params):
        z, c = self.pw.forward(x, sub(params, "pw"))
        g = T.sigmoid(z)
        return g * x, (x, g, c)

    def backward(self, cache, gy):
        x, g, c = cache
        gz = gy * x * g * (1 - g)
        gx, gp = self.pw.backward(c, gz)
        return gx + gy * g, prefixed("pw", gp)

    def output_shape(self, shape):
        check_channels(shape, self.channels, "gpa")
        return tuple(shape)

    def trace(self, shape, prefix, records):
        self.pw.trace(self.output_shape(shape), f"{prefix}.pw", records)
        return tuple(shape)


class RegularLocalAttention(Module):
    """x + PW(relu(DW3x3(x)))."""

    kind = "rla"

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.add("dw", Conv2d(channels, channels, 3, 1, 1, groups=channels))
        self.add("act", Activation("relu"))
        self.add("pw", Conv2d(channels, channels, 1))

    def forward(self, x, params):
        check_channels(x.shape, self.channels, "rla")
        h, caches = x, []
        for name, layer in self.children.items():
            h, c = layer.forward(h, sub(params, name))
            caches.append(c)
        return x + h, caches

    def backward(self, caches, gy):
        g, grads = gy, {}
        for (name, layer), c in reversed(list(zip(self.children.items(), caches))):
            g, gl = layer.backward(c, g)
            grads.update(prefixed(name, gl))
        return gy + g, grads

    def output_shape(self, shape):
        check_channels(shape, self.channels, "rla")
        return tuple(shape)

    def trace(self, shape, prefix, records):
        s = self.output_shape(shape)
        for name, layer in self.children.items():
            s = layer.trace(s, f"{prefix}.{name}", records)
        return tuple(shape)


class _SparseTokenAttention(Module):
    """Shared token plumbing: every token queries a selected key/value subset."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels

    def key_count(self, tokens: int) -> int:
        raise NotImplementedError

    def select(self, tok: np.ndarray) -> np.ndarray:
        """Return (N, K) token indices."""
        raise NotImplementedError

    def forward(self, x, params):
        check_channels(x.shape, self.channels, self.kind)
        n, c, h, w = x.shape
        tok = T.to_tokens(x)
        idx = self.select(tok)
        kv = np.take_along_axis(tok, idx[..., None], axis=1)
        out = T.scaled_dot_attention(tok, kv, kv) + tok
        return T.from_tokens(out, h, w), (tok, kv, idx, h, w)

    def backward(self, cache, gy):
        tok, kv, idx, h, w = cache
        gout = T.to_tokens(gy)
        gq, gk, gv = T.scaled_dot_attention_vjp(tok, kv, kv, gout)
        gtok = gout + gq
        rows = np.arange(tok.shape[0])[:, None]
        np.add.at(gtok, (rows, idx), gk + gv)
        return T.from_tokens(gtok, h, w), {}

    def output_shape(self, shape):
        check_channels(shape, self.channels, self.kind)
        self.key_count(shape[2] * shape[3])
        return tuple(shape)

    def macs(self, shape):
        n, c, h, w = shape
        tokens = h * w
        return n * T.attention_macs(tokens, self.key_count(tokens), c)

    def trace(self, shape, prefix, records):
        out = self.output_shape(shape)
        tokens = shape[2] * shape[3]
        records.append(LayerRecord(prefix, self.kind, tuple(shape), out, 0, self.macs(shape),
                                   {"tokens": tokens, "keys": self.key_count(tokens)}))
        return out


class SparseMediumAttention(_SparseTokenAttention):
    """Keys/values are ``samples`` tokens on a uniform row-major grid."""

    kind = "sma"

    def __init__(self, channels: int, samples: Optional[int] = None):
        super().__init__(channels)
        self.samples = samples

    def key_count(self, tokens):
        m = default_sma_samples(tokens) if self.samples is None else self.samples
        if not 1 <= m <= tokens:
            raise ShapeError(f"sma samples M={m} must lie in [1, {tokens}]")
        return m

    def select(self, tok):
        n, tokens, _ = tok.shape
        idx = sma_indices(tokens, self.key_count(tokens))
        return np.broadcast_to(idx, (n, idx.size))


class SparseGlobalAttention(_SparseTokenAttention):
    """Keys/values are the top-k tokens by feature L2 norm (per sample)."""

    kind = "sga"

    def __init__(self, channels: int, k: Optional[int] = None):
        super().__init__(channels)
        self.k = k

    def key_count(self, tokens):
        k = default_sga_k(tokens) if self.k is None else self.k
        if not 1 <= k <= tokens:
            raise ShapeError(f"sga k={k} must lie in [1, {tokens}]")
        return k

    def select(self, tok):
        k = self.key_count(tok.shape[1])
        norms = np.sqrt((tok * tok).sum(axis=2))
        return np.stack([T.top_k(row, k) for row in norms])


class LWGA(Module):
    """Four-branch grouped attention with softmax fusion weights and a 1x1 mix."""

    kind = "lwga"
    branch_names = ("gpa", "rla", "sma", "sga")

    def __init__(self, channels: int, cfg: Optional[LwgaConfig] = None):
        super().__init__()
        if channels % 4:
            raise ShapeError(f"lwga needs channels divisible by 4, got {channels}")
        cfg = cfg or LwgaConfig()
        self.channels, self.cfg = channels, cfg
        q = channels // 4
        self.add("gpa", GatePointAttention(q))
        self.add("rla", RegularLocalAttention(q))
        self.add("sma", SparseMediumAttention(q, cfg.sma_samples))
        self.add("sga", SparseGlobalAttention(q, cfg.sga_k))
        self.add("mix", Conv2d(channels, channels, 1))

    def own_params(self):
        return [ParamSpec("alpha", (4,), "zeros")]

    def forward(self, x, params):
        check_channels(x.shape, self.channels, "lwga")
        q = self.channels // 4
        parts = T.tensor_split(x, [q] * 4)
        alpha = T.softmax(params["alpha"])
        feats, caches = [], []
        for name, part in zip(self.branch_names, parts):
            f, c = self.children[name].forward(part, sub(params, name))
            feats.append(f)
            caches.append(c)
        fused = T.tensor_concat([a * f for a, f in zip(alpha, feats)])
        y, cmix = self.children["mix"].forward(fused, sub(params, "mix"))
        return y, (alpha, feats, caches, cmix)

    def backward(self, cache, gy):
        alpha, feats, caches, cmix = cache
        gfused, gmix = self.children["mix"].backward(cmix, gy)
        grads = prefixed("mix", gmix)
        q = self.channels // 4
        gparts, galpha = [], np.zeros_like(alpha)
        for i, (name, f, c) in enumerate(zip(self.branch_names, feats, caches)):
            gs = gfused[:, i * q:(i + 1) * q]
            galpha[i] = np.sum(gs * f)
            gp, gb = self.children[name].backward(c, alpha[i] * gs)
            gparts.append(gp)
            grads.update(prefixed(name, gb))
        grads["alpha"] = T.softmax_vjp(alpha, galpha)
        return np.concatenate(gparts, axis=1), grads

    def fusion_weights(self, params) -> np.ndarray:
        return T.softmax(params["alpha"])

    def output_shape(self, shape):
        check_channels(shape, self.channels, "lwga")
        n, c, h, w = shape
        for name in self.branch_names:
            self.children[name].output_shape((n, c // 4, h, w))
        return tuple(shape)

    def attention_macs(self, shape) -> int:
        n, c, h, w = shape
        q = (n, c // 4, h, w)
        return self.children["sma"].macs(q) + self.children["sga"].macs(q)

    def trace(self, shape, prefix, records):
        self.output_shape(shape)
        n, c, h, w = shape
        for name in self.branch_names:
            self.children[name].trace((n, c // 4, h, w), f"{prefix}.{name}", records)
        records.append(LayerRecord(f"{prefix}.fusion", "fusion", tuple(shape), tuple(shape), 4, 0))
        self.children["mix"].trace(shape, f"{prefix}.mix", records)
        return tuple(shape)


class DenseAttention(Module):
    """Single-head full self-attention with 1x1 qkv/out projections and residual.

    Exists as the quadratic-cost reference that LWGA is compared against.
    """

    kind = "dense_attention"

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.add("qkv", Conv2d(channels, 3 * channels, 1))
        self.add("proj", Conv2d(channels, channels, 1))

    def forward(self, x, params):
        check_channels(x.shape, self.channels, "dense_attention")
        n, c, h, w = x.shape
        qkv, cq = self.children["qkv"].forward(x, sub(params, "qkv"))
        q, k, v = (T.to_tokens(t) for t in T.tensor_split(qkv, [c] * 3))
        a = T.from_tokens(T.scaled_dot_attention(q, k, v), h, w)
        y, cp = self.children["proj"].forward(a, sub(params, "proj"))
        return x + y, (q, k, v, cq, cp, h, w)

    def backward(self, cache, gy):
        q, k, v, cq, cp, h, w = cache
        ga, gproj = self.children["proj"].backward(cp, gy)
        gq, gk, gv = T.scaled_dot_attention_vjp(q, k, v, T.to_tokens(ga))
        gqkv = np.concatenate([T.from_tokens(g, h, w) for g in (gq, gk, gv)], axis=1)
        gx, gqkvp = self.children["qkv"].backward(cq, gqkv)
        grads = prefixed("qkv", gqkvp)
        grads.update(prefixed("proj", gproj))
        return gx + gy, grads

    def output_shape(self, shape):
        check_channels(shape, self.channels, "dense_attention")
        return tuple(shape)

    def trace(self, shape, prefix, records):
        self.output_shape(shape)
        n, c, h, w = shape
        self.children["qkv"].trace(shape, f"{prefix}.qkv", records)
        tokens = h * w
        records.append(LayerRecord(f"{prefix}.attn", "attention", tuple(shape), tuple(shape), 0,
                                   n * T.attention_macs(tokens, tokens, c), {"tokens": tokens}))
        self.children["proj"].trace(shape, f"{prefix}.proj", records)
        return tuple(shape)
