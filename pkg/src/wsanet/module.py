"""Layer abstraction over the tensor kernels.

A :class:`Module` holds only static structure.  Parameters live in a flat,
ordered ``dict`` keyed by dotted path (``"stage1.0.pconv.conv.weight"``), so
forward/backward are pure functions of ``(x, params)`` and the gradient
harness can perturb parameters freely.

Initialization visits parameters depth-first (a module's own parameters,
then each child in registration order) and draws fan-in-scaled uniforms
from one SplitMix64 stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .rng import SplitMix64

Params = Dict[str, np.ndarray]
Shape = Tuple[int, int, int, int]


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: Tuple[int, ...]
    init: str = "fan_in"  # fan_in | zeros | ones
    fan_in: int = 1

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass
class LayerRecord:
    name: str
    kind: str
    input_shape: Tuple[int, ...]
    output_shape: Tuple[int, ...]
    params: int
    macs: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "output_shape": list(self.output_shape),
            "params": self.params,
            "macs": self.macs,
        }
        if self.extra:
            d.update(self.extra)
        return d


def sub(params: Params, name: str) -> Params:
    """Slice out a child's parameters, stripping the ``name.`` prefix."""
    p = name + "."
    n = len(p)
    return {k[n:]: v for k, v in params.items() if k.startswith(p)}


def prefixed(name: str, grads: Params) -> Params:
    return {f"{name}.{k}": v for k, v in grads.items()}


class Module:
    kind = "module"

    def __init__(self):
        self.children: Dict[str, Module] = {}

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    # -- parameters ---------------------------------------------------------

    def own_params(self) -> List[ParamSpec]:
        return []

    def param_specs(self, prefix: str = "") -> Iterator[ParamSpec]:
        for p in self.own_params():
            yield ParamSpec(prefix + p.name, p.shape, p.init, p.fan_in)
        for name, child in self.children.items():
            yield from child.param_specs(f"{prefix}{name}.")

    def num_params(self) -> int:
        return sum(p.size for p in self.param_specs())

    def init_params(self, seed: int = 0, dtype=np.float64, rng: Optional[SplitMix64] = None) -> Params:
        rng = SplitMix64(seed) if rng is None else rng
        out: Params = {}
        for spec in self.param_specs():
            if spec.init == "zeros":
                arr = np.zeros(spec.shape)
            elif spec.init == "ones":
                arr = np.ones(spec.shape)
            else:
                bound = np.sqrt(6.0 / spec.fan_in)
                arr = rng.uniform_array(spec.size, -bound, bound).reshape(spec.shape)
            out[spec.name] = arr.astype(dtype)
        return out

    # -- computation --------------------------------------------------------

    def forward(self, x, params: Params):
        """Return ``(y, cache)``."""
        raise NotImplementedError

    def backward(self, cache, gy):
        """Return ``(gx, grads)`` with grads keyed like the local params."""
        raise NotImplementedError

    def __call__(self, x, params: Params):
        return self.forward(x, params)[0]

    # -- static analysis ----------------------------------------------------

    def output_shape(self, shape: Shape) -> Shape:
        return tuple(shape)

    def macs(self, shape: Shape) -> int:
        return 0

    def trace(self, shape: Shape, prefix: str, records: List[LayerRecord]) -> Shape:
        """Append layer records for this module and return its output shape.

        The default treats the module as a leaf.
        """
        out = self.output_shape(shape)
        own = sum(p.size for p in self.own_params())
        records.append(LayerRecord(prefix or self.kind, self.kind, tuple(shape), tuple(out), own, self.macs(shape)))
        return out


def check_channels(shape: Shape, expected: int, what: str):
    if len(shape) != 4:
        raise ShapeError(f"{what}: expected rank-4 shape, got {shape}")
    if shape[1] != expected:
        raise ShapeError(f"{what}: expected {expected} channels, got {shape[1]}")


class Conv2d(Module):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=1, stride=1, padding=0, groups=1, bias=True):
        super().__init__()
        self.spec = T.ConvSpec(in_channels, out_channels, kernel, stride, padding, groups)
        self.bias = bias

    def own_params(self):
        spec = self.spec
        fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
        ps = [ParamSpec("weight", spec.weight_shape, "fan_in", fan_in)]
        if self.bias:
            ps.append(ParamSpec("bias", (spec.out_channels,), "zeros"))
        return ps

    def bound(self, params: Params) -> T.ConvSpec:
        s = self.spec
        return T.ConvSpec(
            s.in_channels, s.out_channels, s.kernel, s.stride, s.padding, s.groups,
            weight=params["weight"], bias=params.get("bias") if self.bias else None,
        )

    def forward(self, x, params):
        spec = self.bound(params)
        return T.conv2d(x, spec), (x, spec)

    def backward(self, cache, gy):
        x, spec = cache
        gx, gw, gb = T.conv2d_vjp(x, spec, gy)
        grads = {"weight": gw}
        if self.bias:
            grads["bias"] = gb
        return gx, grads

    def output_shape(self, shape):
        return self.spec.output_shape(shape)

    def macs(self, shape):
        return self.spec.macs(shape)


class GroupNorm(Module):
    kind = "group_norm"

    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        super().__init__()
        if channels % groups:
            raise ShapeError(f"{channels} channels not divisible by {groups} groups")
        self.channels, self.groups, self.eps = channels, groups, eps

    def own_params(self):
        return [ParamSpec("gamma", (self.channels,), "ones"), ParamSpec("beta", (self.channels,), "zeros")]

    def forward(self, x, params):
        y = T.group_norm(x, self.groups, params["gamma"], params["beta"], self.eps)
        return y, (x, params["gamma"])

    def backward(self, cache, gy):
        x, gamma = cache
        gx, gg, gb = T.group_norm_vjp(x, self.groups, gamma, self.eps, gy)
        return gx, {"gamma": gg, "beta": gb}

    def output_shape(self, shape):
        check_channels(shape, self.channels, "group_norm")
        return tuple(shape)


class Activation(Module):
    kind = "activation"

    def __init__(self, kind: str):
        super().__init__()
        if kind not in ("relu", "sigmoid"):
            raise ValueError(f"unknown activation {kind!r}")
        self.fn = kind

    def forward(self, x, params):
        return T.activation(x, self.fn), x

    def backward(self, cache, gy):
        return T.activation_vjp(cache, self.fn, gy), {}


class AvgPool2d(Module):
    kind = "avg_pool2d"

    def __init__(self, kernel, stride=1, padding=0):
        super().__init__()
        self.kernel, self.stride, self.padding = T._pair(kernel), T._pair(stride), T._pair(padding)

    def forward(self, x, params):
        return T.avg_pool2d(x, self.kernel, self.stride, self.padding), x

    def backward(self, cache, gy):
        return T.avg_pool2d_vjp(cache, self.kernel, self.stride, self.padding, gy), {}

    def output_shape(self, shape):
        n, c, h, w = shape
        return (n, c, *T.ConvSpec(c, c, self.kernel, self.stride, self.padding, groups=c).output_hw(h, w))


def run_sequence(layers, x, params: Params, names):
    """Forward through named children in order; returns (y, caches)."""
    caches = []
    for name, layer in zip(names, layers):
        x, c = layer.forward(x, sub(params, name))
        caches.append(c)
    return x, caches


def back_sequence(layers, caches, gy, names):
    grads: Params = {}
    for name, layer, c in reversed(list(zip(names, layers, caches))):
        gy, g = layer.backward(c, gy)
        grads.update(prefixed(name, g))
    return gy, grads


class Sequential(Module):
    kind = "sequential"

    def __init__(self, *layers: Module, names=None):
        super().__init__()
        names = names or [str(i) for i in range(len(layers))]
        for n, layer in zip(names, layers):
            self.add(n, layer)

    def forward(self, x, params):
        names = list(self.children)
        return run_sequence(self.children.values(), x, params, names)

    def backward(self, caches, gy):
        names = list(self.children)
        gx, grads = back_sequence(list(self.children.values()), caches, gy, names)
        return gx, grads

    def output_shape(self, shape):
        for layer in self.children.values():
            shape = layer.output_shape(shape)
        return shape

    def trace(self, shape, prefix, records):
        for name, layer in self.children.items():
            shape = layer.trace(shape, f"{prefix}.{name}" if prefix else name, records)
        return shape
