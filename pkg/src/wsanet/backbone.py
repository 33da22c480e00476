"""Partial convolution, the FasterNet block and the four-stage backbone."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .module import (Activation, Conv2d, GroupNorm, LayerRecord, Module, Sequential,
                     check_channels, prefixed, sub)


class PConv(Module):
    """3x3 convolution over the leading ``touched`` channels; the rest pass through.

    Parameters
    ----------
    channels : int
        Total channel count C.
    touched : int, optional
        Number of convolved channels c.  Defaults to ``ratio * channels``.
    ratio : float
        Partial ratio used when ``touched`` is omitted.
    """

    kind = "pconv"

    def __init__(self, channels: int, touched: int = None, ratio: float = 0.25, bias: bool = True):
        super().__init__()
        if touched is None:
            touched = Fraction(ratio).limit_denominator(1 << 16) * channels
            if touched.denominator != 1:
                raise ConfigError(f"ratio {ratio} of {channels} channels is not integral")
            touched = int(touched)
        if not 1 <= touched <= channels:
            raise ShapeError(f"touched channels c={touched} must lie in [1, {channels}]")
        self.channels, self.touched = channels, touched
        self.conv = self.add("conv", Conv2d(touched, touched, 3, 1, 1, bias=bias))

    def forward(self, x, params):
        check_channels(x.shape, self.channels, "pconv")
        c = self.touched
        y1, cache = self.conv.forward(x[:, :c], sub(params, "conv"))
        return T.tensor_concat([y1, x[:, c:]]) if c < self.channels else y1, cache

    def backward(self, cache, gy):
        c = self.touched
        g1, grads = self.conv.backward(cache, gy[:, :c])
        gx = np.concatenate([g1, gy[:, c:]], axis=1) if c < self.channels else g1
        return gx, prefixed("conv", grads)

    def output_shape(self, shape):
        check_channels(shape, self.channels, "pconv")
        return tuple(shape)

    def macs(self, shape):
        n, _, h, w = shape
        return self.conv.macs((n, self.touched, h, w))

    def trace(self, shape, prefix, records):
        out = self.output_shape(shape)
        records.append(LayerRecord(prefix, self.kind, tuple(shape), out,
                                   self.conv.spec.param_count(self.conv.bias), self.macs(shape),
                                   {"touched_channels": self.touched}))
        return out


def full_conv_macs(channels: int, shape, kernel: int = 3) -> int:
    """MACs of the dense CxC conv that a PConv of the same width replaces."""
    return T.ConvSpec(channels, channels, kernel, 1, kernel // 2).macs(shape)


def pconv_mac_ratio(channels: int, touched: int, hw=(16, 16)) -> Fraction:
    """Exact MAC ratio PConv / full conv (equals (c/C)^2)."""
    shape = (1, channels, *hw)
    return Fraction(PConv(channels, touched).macs(shape), full_conv_macs(channels, shape))


class FasterBlock(Module):
    """x + PW2(relu(GN(PW1(pconv(x))))) with a x``expansion`` hidden width."""

    kind = "faster_block"

    def __init__(self, width: int, ratio: float = 0.25, expansion: int = 2, gn_groups: int = 4):
        super().__init__()
        hidden = width * expansion
        if hidden % gn_groups:
            raise ConfigError(f"hidden width {hidden} not divisible by {gn_groups} norm groups")
        self.width = width
        self.add("pconv", PConv(width, ratio=ratio))
        self.add("pw1", Conv2d(width, hidden, 1))
        self.add("gn", GroupNorm(hidden, gn_groups))
        self.add("act", Activation("relu"))
        self.add("pw2", Conv2d(hidden, width, 1))

    def forward(self, x, params):
        if x.shape[1] != self.width:
            raise ShapeError(f"faster_block of width {self.width} got {x.shape[1]} channels")
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
        check_channels(shape, self.width, "faster_block")
        return tuple(shape)

    def trace(self, shape, prefix, records):
        s = self.output_shape(shape)
        for name, layer in self.children.items():
            s = layer.trace(s, f"{prefix}.{name}", records)
        return tuple(shape)


@dataclass
class BackboneConfig:
    stage_widths: Tuple[int, int, int, int] = (40, 80, 160, 320)
    stage_depths: Tuple[int, int, int, int] = (1, 2, 8, 2)
    in_channels: int = 1
    partial_ratio: float = 0.25
    expansion: int = 2
    gn_groups: int = 4

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        if len(self.stage_widths) != 4 or len(self.stage_depths) != 4:
            raise ConfigError("backbone needs exactly four stage widths and depths")
        for a, b in zip(self.stage_widths, self.stage_widths[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage widths must double between stages, got {self.stage_widths}")
        if self.stage_widths[0] < 1 or min(self.stage_depths) < 1 or self.in_channels < 1:
            raise ConfigError("widths, depths and input channels must be positive")

    @classmethod
    def toy(cls) -> "BackboneConfig":
        return cls(stage_widths=(8, 16, 32, 64), stage_depths=(1, 1, 2, 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["stage_depths"] = list(self.stage_depths)
        return d


class Backbone(Module):
    """4x4/4 embedding, four FasterNet stages, 2x2/2 merging between them.

    ``forward`` returns the four stage outputs (strides 4, 8, 16, 32).
    """

    kind = "backbone"

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.stage_widths
        self.add("embed", Conv2d(cfg.in_channels, w[0], 4, 4, 0))
        for i in range(4):
            blocks = [FasterBlock(w[i], cfg.partial_ratio, cfg.expansion, cfg.gn_groups)
                      for _ in range(cfg.stage_depths[i])]
            self.add(f"stage{i + 1}", Sequential(*blocks))
            if i < 3:
                self.add(f"merge{i + 1}", Conv2d(w[i], w[i + 1], 2, 2, 0))

    def forward(self, x, params):
        check_channels(x.shape, self.cfg.in_channels, "backbone")
        caches, taps = [], []
        h = x
        for name, layer in self.children.items():
            h, c = layer.forward(h, sub(params, name))
            caches.append(c)
            if name.startswith("stage"):
                taps.append(h)
        return tuple(taps), (caches, [t.shape for t in taps], h.dtype)

    def backward(self, cache, gys):
        caches, tap_shapes, dtype = cache
        gys = [np.zeros(s, dtype) if g is None else g for g, s in zip(gys, tap_shapes)]
        grads = {}
        g = None
        tap = 3
        for (name, layer), c in reversed(list(zip(self.children.items(), caches))):
            if name.startswith("stage"):
                g = gys[tap] if g is None else g + gys[tap]
                tap -= 1
            g, gl = layer.backward(c, g)
            grads.update(prefixed(name, gl))
        return g, grads

    def output_shape(self, shape):
        check_channels(shape, self.cfg.in_channels, "backbone")
        taps = []
        for name, layer in self.children.items():
            shape = layer.output_shape(shape)
            if name.startswith("stage"):
                taps.append(shape)
        return tuple(taps)

    def trace(self, shape, prefix, records):
        check_channels(shape, self.cfg.in_channels, "backbone")
        taps = []
        for name, layer in self.children.items():
            shape = layer.trace(shape, f"{prefix}.{name}" if prefix else name, records)
            if name.startswith("stage"):
                taps.append(shape)
        return tuple(taps)


def build_backbone(cfg: BackboneConfig, seed: int = 0, dtype=np.float64):
    """Return ``(module, params)`` with deterministic initialization."""
    net = Backbone(cfg)
    return net, net.init_params(seed, dtype)


def cost_of(module: Module, input_shape: Sequence[int]) -> dict:
    """Per-layer and total parameter / MAC tallies (FLOPs = 2 * MACs)."""
    records = []
    module.trace(tuple(input_shape), getattr(module, "kind", "root"), records)
    params = sum(r.params for r in records)
    macs = sum(r.macs for r in records)
    return {
        "layers": [r.to_dict() for r in records],
        "params": params,
        "macs": macs,
        "flops": 2 * macs,
    }
