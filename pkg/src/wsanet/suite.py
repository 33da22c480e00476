"""Registry of differentiable ops and the gradient-check suite runner."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, FasterBlock, PConv
from .caa import CAA, CaaConfig
from .errors import GradCheckError
from .gradcheck import SignFlipped, finite_diff_check
from .lwga import (LWGA, DenseAttention, GatePointAttention, LwgaConfig, RegularLocalAttention,
                   SparseGlobalAttention, SparseMediumAttention)
from .module import Activation, AvgPool2d, Conv2d, GroupNorm, Module
from .scconv import CRU, SCConv, SRU

TOLERANCE = 1e-4


class AttentionOp(Module):
    """scaled_dot_attention with the query as input and keys/values as params."""

    kind = "scaled_dot_attention"

    def forward(self, x, params):
        q, k, v = x, params["k"], params["v"]
        return T.scaled_dot_attention(q, k, v), (q, k, v)

    def backward(self, cache, gy):
        gq, gk, gv = T.scaled_dot_attention_vjp(*cache, gy)
        return gq, {"k": gk, "v": gv}


class UpsampleOp(Module):
    kind = "upsample_nearest2x"

    def forward(self, x, params):
        return T.upsample_nearest2x(x), None

    def backward(self, cache, gy):
        return T.upsample_nearest2x_vjp(gy), {}


@dataclass
class OpEntry:
    name: str
    shapes: Sequence[tuple]
    build: Callable[[tuple, np.random.Generator], Tuple[object, np.ndarray, dict]]
    rel_step: float = 1e-5


def _module_case(make: Callable[[tuple], Module], jitter: float = 0.1):
    def build(shape, rng):
        m = make(shape)
        params = m.init_params(int(rng.integers(1 << 31)))
        params = {k: v + jitter * rng.standard_normal(v.shape) for k, v in params.items()}
        return m, rng.standard_normal(shape), params
    return build


def _attention_case(shape, rng):
    mq, mk, d = shape
    return AttentionOp(), rng.standard_normal((2, mq, d)), {
        "k": rng.standard_normal((2, mk, d)), "v": rng.standard_normal((2, mk, d))}


def _toy_net(shape):
    from .model import ModelConfig, WSANet
    return WSANet(ModelConfig.toy(dtype="float64"))


def default_registry() -> List[OpEntry]:
    c = _module_case
    return [
        OpEntry("conv2d", [(2, 3, 5, 5), (1, 4, 6, 7), (2, 2, 4, 4)],
                c(lambda s: Conv2d(s[1], 5, 3, 1, 1))),
        OpEntry("conv2d_strided", [(1, 3, 8, 8), (2, 2, 9, 7), (1, 4, 6, 6)],
                c(lambda s: Conv2d(s[1], 4, 2, 2, 0))),
        OpEntry("conv2d_depthwise", [(2, 3, 5, 5), (1, 4, 6, 7), (1, 8, 4, 4)],
                c(lambda s: Conv2d(s[1], s[1], 3, 1, 1, groups=s[1]))),
        OpEntry("conv2d_strip", [(1, 4, 13, 13), (2, 2, 7, 9), (1, 3, 11, 6)],
                c(lambda s: Conv2d(s[1], s[1], (1, 5), 1, (0, 2), groups=s[1]))),
        OpEntry("group_norm", [(1, 4, 3, 3), (2, 6, 4, 5), (1, 8, 2, 2)],
                c(lambda s: GroupNorm(s[1], 2))),
        OpEntry("relu", [(1, 2, 3, 3), (2, 3, 4, 4), (1, 1, 5, 6)], c(lambda s: Activation("relu"))),
        OpEntry("sigmoid", [(1, 2, 3, 3), (2, 3, 4, 4), (1, 1, 5, 6)], c(lambda s: Activation("sigmoid"))),
        OpEntry("avg_pool2d", [(1, 2, 8, 8), (2, 3, 5, 6), (1, 1, 9, 9)], c(lambda s: AvgPool2d(7, 1, 3))),
        OpEntry("upsample_nearest2x", [(1, 2, 3, 3), (2, 1, 2, 4), (1, 3, 1, 1)], c(lambda s: UpsampleOp())),
        OpEntry("scaled_dot_attention", [(3, 5, 4), (6, 2, 3), (4, 4, 8)], _attention_case),
        OpEntry("pconv", [(1, 8, 5, 5), (2, 4, 4, 6), (1, 16, 3, 3)], c(lambda s: PConv(s[1]))),
        OpEntry("faster_block", [(1, 8, 5, 5), (2, 8, 4, 4), (1, 16, 3, 3)], c(lambda s: FasterBlock(s[1]))),
        OpEntry("gpa", [(1, 2, 4, 4), (2, 3, 3, 5), (1, 4, 2, 2)], c(lambda s: GatePointAttention(s[1]))),
        OpEntry("rla", [(1, 2, 4, 4), (2, 3, 3, 5), (1, 4, 5, 5)], c(lambda s: RegularLocalAttention(s[1]))),
        OpEntry("sma", [(1, 2, 4, 4), (2, 3, 3, 5), (1, 4, 6, 6)],
                c(lambda s: SparseMediumAttention(s[1], max(1, s[2] * s[3] // 3)))),
        OpEntry("sga", [(1, 2, 4, 4), (2, 3, 3, 5), (1, 4, 6, 6)],
                c(lambda s: SparseGlobalAttention(s[1], max(1, s[2] * s[3] // 4)))),
        OpEntry("lwga_apply", [(1, 8, 4, 4), (2, 4, 3, 3), (1, 16, 4, 5)],
                c(lambda s: LWGA(s[1], LwgaConfig(sma_samples=4, sga_k=3)))),
        OpEntry("dense_attention", [(1, 4, 3, 3), (2, 8, 2, 3), (1, 4, 4, 4)],
                c(lambda s: DenseAttention(s[1]))),
        OpEntry("sru", [(1, 8, 4, 4), (2, 4, 3, 3), (1, 16, 3, 5)], c(lambda s: SRU(s[1], 2))),
        OpEntry("cru", [(1, 8, 5, 5), (2, 8, 3, 4), (1, 16, 4, 4)], c(lambda s: CRU(s[1]))),
        OpEntry("scconv", [(1, 8, 5, 5), (2, 8, 3, 4), (1, 16, 4, 4)], c(lambda s: SCConv(s[1]))),
        OpEntry("caa", [(1, 8, 8, 8), (2, 4, 6, 5), (1, 2, 12, 12)], c(lambda s: CAA(s[1], CaaConfig()))),
        OpEntry("backbone", [(1, 1, 32, 32), (2, 1, 32, 32), (1, 2, 64, 32)],
                c(lambda s: Backbone(BackboneConfig((4, 8, 16, 32), (1, 1, 1, 1), in_channels=s[1]))),
                rel_step=1e-7),
        # whole networks hold thousands of ReLUs; a 1e-5 step crosses kinks
        OpEntry("wsa_net", [(1, 1, 64, 64), (2, 1, 64, 64), (1, 1, 64, 96)],
                c(_toy_net, jitter=0.0), rel_step=1e-7),
    ]


def gradcheck_suite(seed: int = 0, registry: Optional[Iterable[OpEntry]] = None,
                    inject: Iterable[str] = (), tolerance: float = TOLERANCE, probes: int = 8) -> dict:
    """Run finite_diff_check over every registered op and shape.

    ``inject`` names ops whose VJP is sign-flipped (harness self-test).
    """
    entries = list(default_registry() if registry is None else registry)
    if not entries:
        raise GradCheckError("nothing to check")
    inject = set(inject)
    unknown = inject - {e.name for e in entries}
    if unknown:
        raise GradCheckError(f"cannot inject into unknown ops {sorted(unknown)}")
    t0 = time.perf_counter()
    results = []
    for i, entry in enumerate(entries):
        for j, shape in enumerate(entry.shapes):
            rng = np.random.default_rng([seed, i, j])
            op, x, params = entry.build(tuple(shape), rng)
            if entry.name in inject:
                op = SignFlipped(op)
            err = finite_diff_check(op, x, params, seed=int(rng.integers(1 << 31)), probes=probes,
                                    rel_step=entry.rel_step)
            results.append({"op": entry.name, "shape": list(shape), "max_rel_error": err,
                            "passed": bool(err <= tolerance)})
    ops: Dict[str, bool] = {}
    for r in results:
        ops[r["op"]] = ops.get(r["op"], True) and r["passed"]
    return {
        "seed": seed,
        "tolerance": tolerance,
        "results": results,
        "ops": ops,
        "failed": sorted(k for k, ok in ops.items() if not ok),
        "passed": all(ops.values()),
        "wall_time_s": time.perf_counter() - t0,
    }
