"""Spatial and channel reconstruction units (SCConv)."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .module import Conv2d, GroupNorm, LayerRecord, Module, check_channels, prefixed, sub


def importance_weights(gamma) -> np.ndarray:
    """Normalized GN scales w_c = gamma_c / sum(gamma)."""
    gamma = np.asarray(gamma)
    return gamma / gamma.sum()


class SRU(Module):
    """Spatial reconstruction unit.

    The gate ``g = sigmoid(gate_scale * w_c * GN(x))`` splits ``x`` into an
    informative part ``g*x`` and a redundant part ``(1-g)*x``; channel halves
    of the two are cross-added.  ``gate_override`` pins ``g`` (any array
    broadcastable to the input) and ``hard=True`` thresholds the gate at 0.5.
    """

    kind = "sru"

    def __init__(self, channels: int, gn_groups: int = 4, gate_scale: float = 1.0,
                 hard: bool = False, gate_override=None):
        super().__init__()
        if channels % 2:
            raise ShapeError(f"sru needs an even channel count, got {channels}")
        self.channels = channels
        self.gate_scale = gate_scale
        self.hard = hard
        self.gate_override = gate_override
        self.gn = self.add("gn", GroupNorm(channels, gn_groups))

    def gate(self, x, params):
        """Return (g, gn_cache, normed, weights); the last three are None when pinned."""
        if self.gate_override is not None:
            return np.broadcast_to(np.asarray(self.gate_override, dtype=x.dtype), x.shape), None, None, None
        normed, gcache = self.gn.forward(x, sub(params, "gn"))
        w = importance_weights(params["gn.gamma"]).reshape(1, -1, 1, 1)
        g = T.sigmoid(self.gate_scale * w * normed)
        if self.hard:
            g = (g > 0.5).astype(x.dtype)
        return g, gcache, normed, w

    def forward(self, x, params):
        check_channels(x.shape, self.channels, "sru")
        g, gcache, normed, w = self.gate(x, params)
        x1 = g * x
        x2 = (1 - g) * x
        h = self.channels // 2
        y = np.concatenate([x1[:, :h] + x2[:, h:], x1[:, h:] + x2[:, :h]], axis=1)
        return y, (x, g, gcache, normed, w, params.get("gn.gamma"))

    def backward(self, cache, gy):
        x, g, gcache, normed, w, gamma = cache
        h = self.channels // 2
        gx1 = gy
        gx2 = np.concatenate([gy[:, h:], gy[:, :h]], axis=1)
        gx = g * gx1 + (1 - g) * gx2
        if gcache is None or self.hard:
            # a pinned or thresholded gate carries no gradient to the GN affine
            return gx, {"gn.gamma": np.zeros(self.channels), "gn.beta": np.zeros(self.channels)}
        gz = x * (gx1 - gx2) * g * (1 - g) * self.gate_scale
        gnormed = gz * w
        gxn, gn_grads = self.gn.backward(gcache, gnormed)
        gw = (gz * normed).sum(axis=(0, 2, 3))
        s = gamma.sum()
        ggamma = gn_grads["gamma"] + gw / s - np.dot(gw, gamma) / s ** 2
        return gx + gxn, {"gn.gamma": ggamma, "gn.beta": gn_grads["beta"]}

    def output_shape(self, shape):
        check_channels(shape, self.channels, "sru")
        return tuple(shape)

    def trace(self, shape, prefix, records):
        self.gn.trace(self.output_shape(shape), f"{prefix}.gn", records)
        return tuple(shape)


class CRU(Module):
    """Channel reconstruction unit: split, transform, pooled-softmax merge.

    Parameters
    ----------
    channels : int
    split_ratio : float
        Fraction of channels routed to the upper (rich) path.
    squeeze : int
        Channel squeeze factor of both 1x1 squeeze convs.
    groups : int
        Groups of the upper path 3x3 conv.
    """

    kind = "cru"

    def __init__(self, channels: int, split_ratio: float = 0.5, squeeze: int = 2, groups: int = 2):
        super().__init__()
        up = Fraction(split_ratio).limit_denominator(1 << 16) * channels
        if up.denominator != 1 or not 0 < up < channels:
            raise ConfigError(f"split ratio {split_ratio} of {channels} channels is not integral")
        up = int(up)
        low = channels - up
        if up % squeeze or low % squeeze:
            raise ConfigError(f"split widths ({up}, {low}) not divisible by squeeze {squeeze}")
        up_s, low_s = up // squeeze, low // squeeze
        if up_s < groups or up_s % groups or channels % groups:
            raise ConfigError(f"squeezed width {up_s} incompatible with {groups} groups")
        if low_s >= channels:
            raise ConfigError("lower path leaves no channels for its pointwise conv")
        self.channels, self.up, self.low, self.up_s, self.low_s = channels, up, low, up_s, low_s
        self.add("squeeze1", Conv2d(up, up_s, 1, bias=False))
        self.add("squeeze2", Conv2d(low, low_s, 1, bias=False))
        self.add("gwc", Conv2d(up_s, channels, 3, 1, 1, groups=groups))
        self.add("pwc1", Conv2d(up_s, channels, 1, bias=False))
        self.add("pwc2", Conv2d(low_s, channels - low_s, 1, bias=False))

    def _f(self, name, x, params):
        return self.children[name].forward(x, sub(params, name))

    def forward(self, x, params):
        check_channels(x.shape, self.channels, "cru")
        xu, xl = T.tensor_split(x, [self.up, self.low])
        su, c_sq1 = self._f("squeeze1", xu, params)
        sl, c_sq2 = self._f("squeeze2", xl, params)
        yg, c_gwc = self._f("gwc", su, params)
        yp, c_pw1 = self._f("pwc1", su, params)
        y1 = yg + yp
        yl, c_pw2 = self._f("pwc2", sl, params)
        y2 = T.tensor_concat([yl, sl])
        s = self.merge_weights(y1, y2)
        out = s[0][:, :, None, None] * y1 + s[1][:, :, None, None] * y2
        return out, (y1, y2, s, c_sq1, c_sq2, c_gwc, c_pw1, c_pw2)

    @staticmethod
    def merge_weights(y1, y2) -> np.ndarray:
        """(2, N, C) per-channel softmax over the two pooled descriptors."""
        return T.softmax(np.stack([T.global_avg_pool(y1), T.global_avg_pool(y2)]), axis=0)

    def backward(self, cache, gy):
        y1, y2, s, c_sq1, c_sq2, c_gwc, c_pw1, c_pw2 = cache
        hw = y1.shape[2] * y1.shape[3]
        gs = np.stack([(gy * y1).sum(axis=(2, 3)), (gy * y2).sum(axis=(2, 3))])
        gpool = T.softmax_vjp(s, gs, axis=0) / hw
        gy1 = s[0][:, :, None, None] * gy + gpool[0][:, :, None, None]
        gy2 = s[1][:, :, None, None] * gy + gpool[1][:, :, None, None]
        ch = self.children
        grads = {}
        gsu_a, g = ch["gwc"].backward(c_gwc, gy1)
        grads.update(prefixed("gwc", g))
        gsu_b, g = ch["pwc1"].backward(c_pw1, gy1)
        grads.update(prefixed("pwc1", g))
        split = self.channels - self.low_s
        gsl, g = ch["pwc2"].backward(c_pw2, gy2[:, :split])
        grads.update(prefixed("pwc2", g))
        gsl = gsl + gy2[:, split:]
        gxu, g = ch["squeeze1"].backward(c_sq1, gsu_a + gsu_b)
        grads.update(prefixed("squeeze1", g))
        gxl, g = ch["squeeze2"].backward(c_sq2, gsl)
        grads.update(prefixed("squeeze2", g))
        return np.concatenate([gxu, gxl], axis=1), grads

    def output_shape(self, shape):
        check_channels(shape, self.channels, "cru")
        return tuple(shape)

    def trace(self, shape, prefix, records):
        n, c, h, w = self.output_shape(shape)
        ch = self.children
        ch["squeeze1"].trace((n, self.up, h, w), f"{prefix}.squeeze1", records)
        ch["squeeze2"].trace((n, self.low, h, w), f"{prefix}.squeeze2", records)
        ch["gwc"].trace((n, self.up_s, h, w), f"{prefix}.gwc", records)
        ch["pwc1"].trace((n, self.up_s, h, w), f"{prefix}.pwc1", records)
        ch["pwc2"].trace((n, self.low_s, h, w), f"{prefix}.pwc2", records)
        records.append(LayerRecord(f"{prefix}.merge", "softmax_merge", tuple(shape), tuple(shape), 0, 0))
        return tuple(shape)


class SCConv(Module):
    """cru(sru(x))."""

    kind = "scconv"

    def __init__(self, channels: int, gn_groups: int = 4, gate_scale: float = 1.0, hard: bool = False,
                 split_ratio: float = 0.5, squeeze: int = 2, groups: int = 2):
        super().__init__()
        self.channels = channels
        self.sru = self.add("sru", SRU(channels, gn_groups, gate_scale, hard))
        self.cru = self.add("cru", CRU(channels, split_ratio, squeeze, groups))

    def forward(self, x, params):
        h, c1 = self.sru.forward(x, sub(params, "sru"))
        y, c2 = self.cru.forward(h, sub(params, "cru"))
        return y, (c1, c2)

    def backward(self, cache, gy):
        c1, c2 = cache
        gh, g2 = self.cru.backward(c2, gy)
        gx, g1 = self.sru.backward(c1, gh)
        grads = prefixed("sru", g1)
        grads.update(prefixed("cru", g2))
        return gx, grads

    def output_shape(self, shape):
        return self.cru.output_shape(self.sru.output_shape(shape))

    def trace(self, shape, prefix, records):
        s = self.sru.trace(shape, f"{prefix}.sru", records)
        return self.cru.trace(s, f"{prefix}.cru", records)
