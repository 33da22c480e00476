"""``wsa`` command line: synthesis, metrics, forward passes, costs, gradcheck, timing.

Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from .bscan_io import bscan_read, bscan_write
from .errors import WsaError
from .model import ModelConfig, assemble_wsa_graph, cost_report, forward_features
from .suite import gradcheck_suite
from .wavefield import (ClutterConfig, FragConfig, Grid, TargetAnnotation, measure_report,
                        synthesize_bscan)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
STRIDE = 32


class _Invalid(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("WSA_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw, 0)
    except ValueError:
        raise _Invalid(f"WSA_SEED must be an integer, got {raw!r}") from None


def _load_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise _Invalid(f"{path}: invalid JSON ({exc})") from None


def _emit(obj, out=None) -> None:
    text = json.dumps(obj, indent=2, default=_json_default)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _finite(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def _model_config(path: Optional[str], seed: Optional[int]) -> ModelConfig:
    cfg = ModelConfig.from_dict(_load_json(path)) if path else ModelConfig.toy()
    if seed is not None:
        cfg.seed = seed
    return cfg


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _draw(rng: np.random.Generator, value):
    """A number is used as is; a two-element list is sampled uniformly."""
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise _Invalid(f"ranges must be [lo, hi], got {value}")
        return float(rng.uniform(value[0], value[1]))
    return value


def _synth_case(job):
    cfg, index, seed, out_dir = job
    case_seed = seed + index
    rng = np.random.default_rng([case_seed, 7])
    grid = Grid(**cfg.get("grid", {}))
    if "targets" in cfg:
        targets = [TargetAnnotation.from_dict(t) for t in cfg["targets"]]
    else:
        width = grid.n_x * grid.dx
        spec = cfg.get("random_target", {})
        targets = [TargetAnnotation(
            x0=_draw(rng, spec.get("x0_m", [0.4 * width, 0.6 * width])),
            depth=_draw(rng, spec.get("depth_m", [0.8, 1.2])),
            eps_r=_draw(rng, spec.get("eps_r", [4.0, 9.0])),
            amplitude=_draw(rng, spec.get("amplitude", [0.5, 2.0])),
            beta=_draw(rng, spec.get("beta_np_per_m", [0.0, 0.3])),
            label=spec.get("label", "cavity"))]
    cl = dict(cfg.get("clutter", {}))
    fr = dict(cfg.get("frag", {}))
    clutter = ClutterConfig(scr_target_db=_draw(rng, cl.get("scr_target_db")),
                            layered_fraction=_draw(rng, cl.get("layered_fraction", 0.3)),
                            scale=_draw(rng, cl.get("scale", 0.0)))
    frag = FragConfig(continuity_target=_draw(rng, fr.get("continuity_target")))
    fc = _draw(rng, cfg.get("fc_ghz", 1.0))
    b, reports = synthesize_bscan(targets, grid, clutter, frag, fc=fc, seed=case_seed)
    path = Path(out_dir) / f"case_{index:04d}.bsc"
    bscan_write(b, targets, path)
    return {"index": index, "seed": case_seed, "path": str(path),
            "scr_target_db": clutter.scr_target_db, "continuity_target": frag.continuity_target,
            "reports": [r.to_dict() for r in reports]}


def cmd_synth(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    if not isinstance(cfg, dict):
        raise _Invalid("synthesis config must be a JSON object")
    unknown = set(cfg) - {"grid", "targets", "random_target", "clutter", "frag", "fc_ghz"}
    if unknown:
        raise _Invalid(f"unknown synthesis config fields {sorted(unknown)}")
    if args.count < 1:
        raise _Invalid("--count must be at least 1")
    seed = default_seed() if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, i, seed, str(out)) for i in range(args.count)]
    if args.jobs > 1 and args.count > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            cases = list(ex.map(_synth_case, jobs))
    else:
        cases = [_synth_case(j) for j in jobs]
    _emit({"count": len(cases), "cases": cases})
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics / forward / flops / gradcheck / bench
# ---------------------------------------------------------------------------


def cmd_metrics(args) -> int:
    b, targets = bscan_read(args.bscan)
    if not targets:
        raise _Invalid(f"{args.bscan}: no target annotations in sidecar")
    reports = [measure_report(b, t, targets) for t in targets]
    if args.json:
        _emit([r.to_dict() for r in reports])
    else:
        for t, r in zip(targets, reports):
            flags = ",".join(sorted(r.flags)) or "-"
            print(f"x0={t.x0:.3f}m d={t.depth:.3f}m C={r.contrast:.4f} SCR={_finite(r.scr_db)}dB "
                  f"cont={r.continuity:.3f} diss={r.dissipation_db:.2f}dB weak={r.is_weak} flags={flags}")
    return EXIT_OK


def _scan_input(samples: np.ndarray, in_channels: int) -> np.ndarray:
    """Zero-pad a (T, X) scan up to multiples of the network stride."""
    n_t, n_x = samples.shape
    ht, wx = -(-n_t // STRIDE) * STRIDE, -(-n_x // STRIDE) * STRIDE
    x = np.zeros((1, in_channels, ht, wx), dtype=np.float64)
    x[:, :, :n_t, :n_x] = samples
    return x


def cmd_forward(args) -> int:
    b, _ = bscan_read(args.bscan)
    cfg = _model_config(args.model, args.seed)
    x = _scan_input(b.samples, cfg.backbone.in_channels)
    graph = assemble_wsa_graph(cfg, x.shape)
    outs, stats = forward_features(graph, x)
    report = {"input_shape": list(x.shape), "scan_shape": list(b.shape),
              "outputs": {lv: list(o.shape) for lv, o in zip(("P3", "P4", "P5"), outs)},
              "stats": stats}
    _emit(report, args.stats)
    if args.stats:
        print(json.dumps(report["outputs"]))
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _model_config(args.model, None)
    shape = None
    if args.input:
        shape = tuple(int(v) for v in args.input.split("x"))
        if len(shape) != 4:
            raise _Invalid("--input must look like NxCxHxW")
    graph = assemble_wsa_graph(cfg, shape)
    rep = cost_report(graph)
    if not args.layers:
        rep.pop("layers")
    _emit(rep)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = default_seed() if args.seed is None else args.seed
    rep = gradcheck_suite(seed, inject=args.inject or ())
    _emit(rep, args.out)
    return EXIT_OK if rep["passed"] else EXIT_INVALID


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise _Invalid("--iters must be at least 1")
    cfg = _model_config(args.model, args.seed)
    graph = assemble_wsa_graph(cfg)
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal(graph.input_shape).astype(graph.dtype)
    forward_features(graph, x)  # warm-up
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        forward_features(graph, x)
        times.append(time.perf_counter() - t0)
    _emit({"input_shape": list(graph.input_shape), "iters": args.iters,
           "mean_s": float(np.mean(times)), "min_s": float(np.min(times)), "max_s": float(np.max(times))})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wsa", description="Weak-signal GPR feature network toolkit")
    sp = p.add_subparsers(dest="command", required=True)

    s = sp.add_parser("synth", help="generate synthetic B-scans")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sp.add_parser("metrics", help="weak-signal metrics of an annotated B-scan")
    s.add_argument("--bscan", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_metrics)

    s = sp.add_parser("forward", help="run the network on a B-scan")
    s.add_argument("--bscan", required=True)
    s.add_argument("--model")
    s.add_argument("--stats")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_forward)

    s = sp.add_parser("flops", help="parameter and FLOP report")
    s.add_argument("--model")
    s.add_argument("--input", help="NxCxHxW, defaults to the config input")
    s.add_argument("--layers", action="store_true", help="include per-layer records")
    s.set_defaults(func=cmd_flops)

    s = sp.add_parser("gradcheck", help="finite-difference VJP suite")
    s.add_argument("--seed", type=int)
    s.add_argument("--inject", action="append", help="sign-flip this op's VJP (self-test)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sp.add_parser("bench", help="wall-clock per forward pass")
    s.add_argument("--model")
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (_Invalid, WsaError, ValueError, KeyError, TypeError) as exc:
        print(f"wsa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"wsa {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
