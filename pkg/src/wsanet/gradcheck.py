"""Central-difference verification of vector-Jacobian products."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import GradCheckError


def _as_list(y):
    return list(y) if isinstance(y, (tuple, list)) else [y]


def _require_f64(name, arr):
    if np.asarray(arr).dtype != np.float64:
        raise GradCheckError(f"{name} must be float64 for gradient checks, got {np.asarray(arr).dtype}")


def finite_diff_check(op, x, params: Optional[dict] = None, seed: int = 0, probes: int = 8,
                      rel_step: float = 1e-5) -> float:
    """Max relative error between VJP and central-difference directional derivatives.

    For each random probe direction ``v`` (over the input and every
    parameter) and a fixed random output cotangent ``u``, compares
    ``<J^T u, v>`` against ``<u, f(x + v) - f(x - v)> / 2``.  Each coordinate
    of ``v`` is scaled by ``rel_step * max(1, |value|)``.
    """
    params = dict(params or {})
    _require_f64("input", x)
    for k, v in params.items():
        _require_f64(f"param {k!r}", v)
    backward = getattr(op, "backward", None)
    if backward is None:
        raise GradCheckError(f"{type(op).__name__} has no VJP")

    rng = np.random.default_rng(seed)
    y, cache = op.forward(x, params)
    outs = _as_list(y)
    u = [rng.standard_normal(o.shape) for o in outs]
    try:
        gx, gp = backward(cache, tuple(u) if isinstance(y, (tuple, list)) else u[0])
    except NotImplementedError as exc:
        raise GradCheckError(f"{type(op).__name__} has no VJP") from exc
    missing = set(params) - set(gp)
    if missing:
        raise GradCheckError(f"no gradient returned for {sorted(missing)}")

    def contract(yy):
        return sum(float(np.sum(ui * yi)) for ui, yi in zip(u, _as_list(yy)))

    hx = rel_step * np.maximum(1.0, np.abs(x))
    hp = {k: rel_step * np.maximum(1.0, np.abs(v)) for k, v in params.items()}
    worst = 0.0
    for _ in range(probes):
        vx = rng.standard_normal(x.shape) * hx
        vp = {k: rng.standard_normal(v.shape) * hp[k] for k, v in params.items()}
        analytic = float(np.sum(gx * vx)) + sum(float(np.sum(gp[k] * vp[k])) for k in params)
        f_plus = op.forward(x + vx, {k: params[k] + vp[k] for k in params})[0]
        f_minus = op.forward(x - vx, {k: params[k] - vp[k] for k in params})[0]
        numeric = 0.5 * (contract(f_plus) - contract(f_minus))
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


class SignFlipped:
    """Wraps an op and negates every cotangent its VJP returns."""

    def __init__(self, op):
        self.op = op

    def forward(self, x, params):
        return self.op.forward(x, params)

    def backward(self, cache, gy):
        gx, gp = self.op.backward(cache, gy)
        return -gx, {k: -v for k, v in gp.items()}
