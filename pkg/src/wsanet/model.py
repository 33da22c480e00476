"""Full network assembly: backbone, terminal CAA, top-down SCConv/LWGA neck, heads.

Level layout (stride relative to the input)::

    stage4 (32) --caa--> neck_p5 ----------------------------> head_p5
                            | up x2
    stage3 (16) ------- concat -> neck_p4 -------------------> head_p4
                                     | up x2
    stage2 (8)  ---------------- concat -> neck_p3 ----------> head_p3

Each ``neck_pX`` is a 1x1 reduce conv followed (when enabled) by SCConv and
then LWGA.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, FasterBlock, full_conv_macs
from .caa import CAA, CaaConfig
from .errors import ConfigError, ShapeError
from .lwga import LWGA, DenseAttention, LwgaConfig, lwga_attention_macs
from .module import Conv2d, LayerRecord, Module, Sequential, prefixed, sub

LEVELS = ("P3", "P4", "P5")
LINEARITY_TOKENS = (64, 256, 1024)


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    caa: CaaConfig = field(default_factory=CaaConfig)
    lwga: Dict[str, LwgaConfig] = field(default_factory=lambda: {lv: LwgaConfig() for lv in LEVELS})
    neck_levels: Tuple[str, ...] = LEVELS
    head_channels: int = 8
    seed: int = 0
    enable_caa: bool = True
    enable_scconv: bool = True
    enable_lwga: bool = True
    attention: str = "lwga"  # lwga | dense
    input_hw: Tuple[int, int] = (64, 64)
    dtype: str = "float32"

    def __post_init__(self):
        self.neck_levels = tuple(self.neck_levels)
        self.input_hw = tuple(int(v) for v in self.input_hw)
        if self.neck_levels != LEVELS:
            raise ConfigError(f"neck levels must be {list(LEVELS)}, got {list(self.neck_levels)}")
        if isinstance(self.lwga, LwgaConfig):
            self.lwga = {lv: self.lwga for lv in LEVELS}
        missing = set(LEVELS) - set(self.lwga)
        if missing:
            raise ConfigError(f"lwga config missing levels {sorted(missing)}")
        if self.attention not in ("lwga", "dense"):
            raise ConfigError(f"attention must be 'lwga' or 'dense', got {self.attention!r}")
        if self.head_channels < 1:
            raise ConfigError("head_channels must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        return cls(backbone=BackboneConfig.toy(), **kw)

    @property
    def level_widths(self) -> Dict[str, int]:
        w = self.backbone.stage_widths
        return {"P3": w[1], "P4": w[2], "P5": w[3]}

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "caa": self.caa.to_dict(),
            "lwga": {lv: self.lwga[lv].to_dict() for lv in LEVELS},
            "neck_levels": list(self.neck_levels),
            "head_channels": self.head_channels,
            "seed": self.seed,
            "enable": {"caa": self.enable_caa, "scconv": self.enable_scconv, "lwga": self.enable_lwga},
            "attention": self.attention,
            "input_hw": list(self.input_hw),
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {"backbone", "caa", "lwga", "neck_levels", "head_channels", "seed", "enable",
                 "attention", "input_hw", "dtype"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields {sorted(unknown)}")
        lw = d.get("lwga", {})
        if lw and set(lw) <= set(LEVELS):
            lwga = {lv: LwgaConfig(**lw.get(lv, {})) for lv in LEVELS}
        else:
            lwga = {lv: LwgaConfig(**lw) for lv in LEVELS}
        enable = d.get("enable", {})
        kw = {k: d[k] for k in ("neck_levels", "head_channels", "seed", "attention", "input_hw", "dtype") if k in d}
        try:
            return cls(
                backbone=BackboneConfig(**d.get("backbone", {})),
                caa=CaaConfig(**d.get("caa", {})),
                lwga=lwga,
                enable_caa=bool(enable.get("caa", True)),
                enable_scconv=bool(enable.get("scconv", True)),
                enable_lwga=bool(enable.get("lwga", True)),
                **kw,
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _summary(y: np.ndarray) -> dict:
    y = np.asarray(y, dtype=np.float64)
    return {"min": float(y.min()), "max": float(y.max()), "mean": float(y.mean()),
            "l2": float(np.sqrt(np.sum(y * y)))}


class WSANet(Module):
    kind = "wsa_net"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        from .scconv import SCConv

        self.cfg = cfg
        widths = cfg.level_widths
        self.add("backbone", Backbone(cfg.backbone))
        if cfg.enable_caa:
            self.add("caa", CAA(widths["P5"], cfg.caa))
        inputs = {"P5": widths["P5"], "P4": widths["P5"] + widths["P4"], "P3": widths["P4"] + widths["P3"]}
        for lv in ("P5", "P4", "P3"):
            w = widths[lv]
            layers, names = [Conv2d(inputs[lv], w, 1)], ["reduce"]
            if cfg.enable_scconv:
                layers.append(SCConv(w))
                names.append("scconv")
            if cfg.enable_lwga:
                layers.append(LWGA(w, cfg.lwga[lv]) if cfg.attention == "lwga" else DenseAttention(w))
                names.append("lwga" if cfg.attention == "lwga" else "dense_attention")
            self.add(f"neck_{lv.lower()}", Sequential(*layers, names=names))
        for lv in LEVELS:
            self.add(f"head_{lv.lower()}", Conv2d(widths[lv], cfg.head_channels, 1))

    def _run(self, name, x, params):
        return self.children[name].forward(x, sub(params, name))

    def forward(self, x, params, stats: Optional[dict] = None):
        caches = {}
        taps, caches["backbone"] = self._run("backbone", x, params)
        c2, c3, c4, c5 = taps
        if stats is not None:
            for i, t in enumerate(taps):
                stats[f"backbone.stage{i + 1}"] = _summary(t)
        p5 = c5
        if "caa" in self.children:
            p5, caches["caa"] = self._run("caa", c5, params)
            if stats is not None:
                stats["caa"] = _summary(p5)
        n5, caches["neck_p5"] = self._run("neck_p5", p5, params)
        n4, caches["neck_p4"] = self._run("neck_p4", T.tensor_concat([T.upsample_nearest2x(n5), c4]), params)
        n3, caches["neck_p3"] = self._run("neck_p3", T.tensor_concat([T.upsample_nearest2x(n4), c3]), params)
        outs = []
        for lv, n in (("p3", n3), ("p4", n4), ("p5", n5)):
            y, caches[f"head_{lv}"] = self._run(f"head_{lv}", n, params)
            outs.append(y)
            if stats is not None:
                stats[f"neck_{lv}"] = _summary(n)
                stats[f"head_{lv}"] = _summary(y)
        return tuple(outs), (caches, c2.shape, c2.dtype)

    def backward(self, cache, gys):
        caches, c2_shape, dtype = cache
        grads = {}

        def back(name, g):
            gx, gp = self.children[name].backward(caches[name], g)
            grads.update(prefixed(name, gp))
            return gx

        widths = self.cfg.level_widths
        gn = {lv: back(f"head_{lv}", g) for lv, g in zip(("p3", "p4", "p5"), gys)}
        gcat3 = back("neck_p3", gn["p3"])
        gn["p4"] = gn["p4"] + T.upsample_nearest2x_vjp(gcat3[:, : widths["P4"]])
        gc3 = gcat3[:, widths["P4"]:]
        gcat4 = back("neck_p4", gn["p4"])
        gn["p5"] = gn["p5"] + T.upsample_nearest2x_vjp(gcat4[:, : widths["P5"]])
        gc4 = gcat4[:, widths["P5"]:]
        gc5 = back("neck_p5", gn["p5"])
        if "caa" in self.children:
            gc5 = back("caa", gc5)
        gx = back("backbone", (np.zeros(c2_shape, dtype), gc3, gc4, gc5))
        return gx, grads

    def trace(self, shape, prefix, records):
        def join(name):
            return f"{prefix}.{name}" if prefix else name

        def concat_shape(a, b, where):
            if (a[0], a[2], a[3]) != (b[0], b[2], b[3]):
                raise ShapeError(f"{where}: cannot concat {a} with {b}")
            out = (a[0], a[1] + b[1], a[2], a[3])
            records.append(LayerRecord(join(where), "upsample_concat", tuple(a), out, 0, 0))
            return out

        def up(s):
            return (s[0], s[1], 2 * s[2], 2 * s[3])

        c2, c3, c4, c5 = self.children["backbone"].trace(shape, join("backbone"), records)
        p5 = self.children["caa"].trace(c5, join("caa"), records) if "caa" in self.children else c5
        n5 = self.children["neck_p5"].trace(p5, join("neck_p5"), records)
        n4 = self.children["neck_p4"].trace(concat_shape(up(n5), c4, "fuse_p4"), join("neck_p4"), records)
        n3 = self.children["neck_p3"].trace(concat_shape(up(n4), c3, "fuse_p3"), join("neck_p3"), records)
        return tuple(self.children[f"head_{lv}"].trace(n, join(f"head_{lv}"), records)
                     for lv, n in (("p3", n3), ("p4", n4), ("p5", n5)))


@dataclass
class LayerGraph:
    """An assembled, statically shape-checked network with its parameters."""

    config: ModelConfig
    module: WSANet
    params: Dict[str, np.ndarray]
    input_shape: Tuple[int, int, int, int]
    records: List[LayerRecord]
    output_shapes: Tuple[tuple, ...]

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def forward(self, x):
        return self.module(x, self.params)

    def to_dict(self) -> dict:
        return {
            "format": "wsa-graph-1",
            "config": self.config.to_dict(),
            "input_shape": list(self.input_shape),
            "output_shapes": [list(s) for s in self.output_shapes],
            "layers": [r.to_dict() for r in self.records],
            "params": {k: {"shape": list(v.shape), "data": [float(e) for e in v.ravel()]}
                       for k, v in self.params.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "LayerGraph":
        d = json.loads(text)
        cfg = ModelConfig.from_dict(d["config"])
        g = assemble_wsa_graph(cfg, tuple(d["input_shape"]))
        if list(g.params) != list(d["params"]):
            raise ConfigError("serialized parameter names do not match the configured graph")
        for k, rec in d["params"].items():
            arr = np.array(rec["data"], dtype=g.dtype).reshape(rec["shape"])
            if arr.shape != g.params[k].shape:
                raise ShapeError(f"parameter {k}: shape {arr.shape} != {g.params[k].shape}")
            g.params[k] = arr
        return g

    def param_stream(self) -> bytes:
        """All parameters concatenated in initialization order."""
        return b"".join(np.ascontiguousarray(v).tobytes() for v in self.params.values())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def assemble_wsa_graph(cfg: ModelConfig, input_shape: Optional[Sequence[int]] = None) -> LayerGraph:
    """Build, shape-check and deterministically initialize the network."""
    module = WSANet(cfg)
    if input_shape is None:
        input_shape = (1, cfg.backbone.in_channels, *cfg.input_hw)
    input_shape = tuple(int(v) for v in input_shape)
    records: List[LayerRecord] = []
    outs = module.trace(input_shape, "", records)
    params = module.init_params(cfg.seed, np.dtype(cfg.dtype))
    return LayerGraph(cfg, module, params, input_shape, records, outs)


def forward_features(graph: LayerGraph, x) -> Tuple[Tuple[np.ndarray, ...], dict]:
    """Run the network; returns per-level outputs (P3, P4, P5) and activation stats."""
    x = T.as_tensor(x).astype(graph.dtype, copy=False)
    if x.shape[1:] != graph.input_shape[1:]:
        raise ShapeError(f"input shape {x.shape} does not match graph input {graph.input_shape}")
    stats: dict = {}
    outs, _ = graph.module.forward(x, graph.params, stats=stats)
    return outs, stats


def _exact_quadratic_fit(xs, ys) -> Tuple[Fraction, Fraction, Fraction]:
    """Coefficients (a, b, c) of the unique quadratic through three points."""
    (x0, x1, x2), (y0, y1, y2) = [Fraction(v) for v in xs], [Fraction(v) for v in ys]
    d01 = (y1 - y0) / (x1 - x0)
    d12 = (y2 - y1) / (x2 - x1)
    a = (d12 - d01) / (x2 - x0)
    b = d01 - a * (x0 + x1)
    c = y0 - a * x0 * x0 - b * x0
    return a, b, c


def lwga_linearity_table(d: int, samples: int = 16, k: int = 16, tokens=LINEARITY_TOKENS) -> dict:
    macs = [lwga_attention_macs(n, d, samples, k) for n in tokens]
    a, b, c = _exact_quadratic_fit(tokens, macs)
    return {
        "tokens": list(tokens),
        "sma_samples": samples,
        "sga_k": k,
        "d": d,
        "attention_macs": macs,
        "quadratic_coefficient": float(a),
        "linear_coefficient": float(b),
        "intercept": float(c),
    }


def _first_pconv_ratio(module: WSANet, input_shape) -> Fraction:
    bb = module.children["backbone"]
    block = next(iter(bb.children["stage1"].children.values()))
    assert isinstance(block, FasterBlock)
    pconv = block.children["pconv"]
    n = input_shape[0]
    h, w = input_shape[2] // 4, input_shape[3] // 4
    shape = (n, pconv.channels, h, w)
    return Fraction(pconv.macs(shape), full_conv_macs(pconv.channels, shape))


def cost_report(graph: LayerGraph, input_shape: Optional[Sequence[int]] = None) -> dict:
    """Per-layer and total params/MACs/FLOPs plus the PConv ratio and LWGA linearity table."""
    shape = tuple(input_shape) if input_shape is not None else graph.input_shape
    records: List[LayerRecord] = []
    graph.module.trace(shape, "", records)
    params = sum(r.params for r in records)
    macs = sum(r.macs for r in records)
    attn = sum(r.macs for r in records if r.kind in ("sma", "sga", "attention"))
    d = graph.config.level_widths["P3"] // 4
    return {
        "input_shape": list(shape),
        "layers": [r.to_dict() for r in records],
        "total": {"params": params, "macs": macs, "flops": 2 * macs, "attention_macs": attn,
                  "params_M": params / 1e6, "flops_G": 2 * macs / 1e9},
        "pconv_full_ratio": float(_first_pconv_ratio(graph.module, shape)),
        "lwga_linearity": lwga_linearity_table(d),
    }
