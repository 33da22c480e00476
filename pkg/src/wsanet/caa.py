"""Context anchor attention: pool, pointwise + strip depthwise convs, sigmoid gate."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError
from .module import AvgPool2d, Conv2d, Module, check_channels, prefixed, sub


@dataclass
class CaaConfig:
    kernel: int = 11
    pool: int = 7

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"strip kernel must be odd, got {self.kernel}")
        if self.pool < 1 or self.pool % 2 == 0:
            raise ConfigError(f"pool window must be odd, got {self.pool}")

    def to_dict(self):
        return {"kernel": self.kernel, "pool": self.pool}


class CAA(Module):
    """a = sigmoid(pw2(dw_kx1(dw_1xk(pw1(avgpool(x)))))); returns a * x."""

    kind = "caa"
    stages = ("pool", "pw1", "strip_h", "strip_v", "pw2")

    def __init__(self, channels: int, cfg: CaaConfig = None):
        super().__init__()
        cfg = cfg or CaaConfig()
        self.channels, self.cfg = channels, cfg
        k, r = cfg.kernel, cfg.kernel // 2
        self.add("pool", AvgPool2d(cfg.pool, 1, cfg.pool // 2))
        self.add("pw1", Conv2d(channels, channels, 1))
        self.add("strip_h", Conv2d(channels, channels, (1, k), 1, (0, r), groups=channels))
        self.add("strip_v", Conv2d(channels, channels, (k, 1), 1, (r, 0), groups=channels))
        self.add("pw2", Conv2d(channels, channels, 1))

    def attention_map(self, x, params):
        h, caches = x, []
        for name in self.stages:
            h, c = self.children[name].forward(h, sub(params, name))
            caches.append(c)
        return T.sigmoid(h), caches

    def forward(self, x, params):
        check_channels(x.shape, self.channels, "caa")
        a, caches = self.attention_map(x, params)
        return a * x, (x, a, caches)

    def backward(self, cache, gy):
        x, a, caches = cache
        g = gy * x * a * (1 - a)
        grads = {}
        for name, c in zip(reversed(self.stages), reversed(caches)):
            g, gl = self.children[name].backward(c, g)
            grads.update(prefixed(name, gl))
        return gy * a + g, grads

    def output_shape(self, shape):
        check_channels(shape, self.channels, "caa")
        s = shape
        for name in self.stages:
            s = self.children[name].output_shape(s)
        return tuple(shape)

    def trace(self, shape, prefix, records):
        self.output_shape(shape)
        s = shape
        for name in self.stages:
            s = self.children[name].trace(s, f"{prefix}.{name}", records)
        return tuple(shape)
