"""Synthetic GPR B-scans and the weak-signal metric suite.

A B-scan is a (time sample x trace) grid.  Each buried point scatterer
traces a diffraction hyperbola ``t(x) = (2/v) sqrt(d^2 + (x - x0)^2)``.
The generator deposits Ricker pulses along each hyperbola, adds a mix of
layered and AR(1) clutter scaled to a requested signal-to-clutter ratio,
and knocks out column runs of the arc to reach a requested continuity.
The generator closes the loop with the same measurement functions it
exports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import lfilter

from .errors import WavefieldError

C0_M_PER_NS = 0.3
NEPER_TO_DB = 20.0 / math.log(10.0)

# region bandings (samples)
ARC_BAND_HALF = 3
BACKGROUND_EXCLUSION = 10
CONTINUITY_WINDOW = 2
CONTINUITY_FRACTION = 0.2
AR_COEFFICIENT = 0.9

LABELS = ("cavity", "void", "loose", "water-rich")
FLAG_NAMES = ("low_contrast", "clutter_dominance", "geometric_atrophy", "deep_attenuated")


@dataclass(frozen=True)
class WeakSignalThresholds:
    contrast: float = 0.2
    scr_db: float = -5.0
    continuity: float = 0.6
    depth_m: float = 1.5
    dissipation_db: float = 40.0


THRESHOLDS = WeakSignalThresholds()


@dataclass
class BScan:
    """Radargram, rows are time samples, columns are traces."""

    samples: np.ndarray
    dt: float  # ns
    dx: float  # m
    t0: float = 0.0  # ns

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or min(self.samples.shape) < 1:
            raise WavefieldError(f"B-scan must be a non-empty 2-D grid, got shape {self.samples.shape}")
        if not (self.dt > 0 and self.dx > 0):
            raise WavefieldError("dt and dx must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise WavefieldError("B-scan samples must be finite")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.samples.shape

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.shape[0])

    def positions(self) -> np.ndarray:
        return self.dx * np.arange(self.shape[1])


@dataclass
class TargetAnnotation:
    x0: float  # m
    depth: float  # m
    eps_r: float = 9.0
    amplitude: float = 1.0
    beta: float = 0.0  # Np/m
    label: str = "cavity"

    def __post_init__(self):
        if not self.depth > 0:
            raise WavefieldError(f"target depth must be positive, got {self.depth}")
        if self.eps_r < 1:
            raise WavefieldError(f"relative permittivity must be >= 1, got {self.eps_r}")
        if self.beta < 0:
            raise WavefieldError(f"attenuation must be non-negative, got {self.beta}")
        if self.label not in LABELS:
            raise WavefieldError(f"label must be one of {LABELS}, got {self.label!r}")

    @property
    def velocity(self) -> float:
        return C0_M_PER_NS / math.sqrt(self.eps_r)

    def to_dict(self) -> dict:
        return {"x0_m": self.x0, "depth_m": self.depth, "eps_r": self.eps_r,
                "amplitude": self.amplitude, "beta_np_per_m": self.beta, "label": self.label}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetAnnotation":
        return cls(x0=float(d["x0_m"]), depth=float(d["depth_m"]), eps_r=float(d["eps_r"]),
                   amplitude=float(d["amplitude"]), beta=float(d["beta_np_per_m"]), label=str(d["label"]))


@dataclass
class WeakSignalReport:
    contrast: float
    scr_db: float
    continuity: float
    dissipation_db: float
    depth_m: float
    flags: FrozenSet[str] = frozenset()

    @property
    def is_weak(self) -> bool:
        return bool(self.flags)

    def to_dict(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")
        return {"contrast": num(self.contrast), "scr_db": num(self.scr_db), "continuity": self.continuity,
                "dissipation_db": self.dissipation_db, "depth_m": self.depth_m,
                "flags": [f for f in FLAG_NAMES if f in self.flags], "is_weak": self.is_weak}


# ---------------------------------------------------------------------------
# Physics
# ---------------------------------------------------------------------------


def ricker(t, fc: float):
    """Ricker wavelet, t in ns and fc in GHz; unit peak at t = 0."""
    if not fc > 0:
        raise WavefieldError("centre frequency must be positive")
    a = (np.pi * fc * np.asarray(t, dtype=np.float64)) ** 2
    out = (1.0 - 2.0 * a) * np.exp(-a)
    return float(out) if np.ndim(out) == 0 else out


def hyperbola_travel_time(x, tgt: TargetAnnotation):
    """Two-way travel time (ns) from antenna position x (m) to the scatterer."""
    r = np.sqrt(tgt.depth ** 2 + (np.asarray(x, dtype=np.float64) - tgt.x0) ** 2)
    out = 2.0 * r / tgt.velocity
    return float(out) if np.ndim(out) == 0 else out


def measure_dissipation(tgt: TargetAnnotation) -> float:
    """Two-way amplitude attenuation along the vertical path, in dB."""
    return NEPER_TO_DB * tgt.beta * 2.0 * tgt.depth


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------


@dataclass
class _ArcGeometry:
    center: np.ndarray  # nearest sample index per column (may lie outside the grid)
    span: np.ndarray  # columns whose travel time falls inside the grid
    apex: int  # span column with the smallest travel time
    band: np.ndarray  # (T, X) bool


def _arc_geometry(shape, dt, dx, t0, tgt: TargetAnnotation) -> _ArcGeometry:
    n_t, n_x = shape
    t = hyperbola_travel_time(dx * np.arange(n_x), tgt)
    frac = (t - t0) / dt
    center = np.rint(frac).astype(np.int64)
    span = np.flatnonzero((frac >= 0) & (frac <= n_t - 1))
    if span.size == 0:
        raise WavefieldError("target arc lies outside the B-scan grid")
    apex = int(span[np.argmin(t[span])])
    rows = np.arange(n_t)[:, None]
    band = np.abs(rows - center[None, :]) <= ARC_BAND_HALF
    band[:, np.setdiff1d(np.arange(n_x), span)] = False
    return _ArcGeometry(center, span, apex, band)


def _background(shape, geoms: Sequence[_ArcGeometry]) -> np.ndarray:
    rows = np.arange(shape[0])[:, None]
    bg = np.ones(shape, dtype=bool)
    for g in geoms:
        bg &= np.abs(rows - g.center[None, :]) >= BACKGROUND_EXCLUSION
    return bg


def _geoms(b: BScan, tgt: TargetAnnotation, targets: Optional[Sequence[TargetAnnotation]]):
    targets = [tgt] if targets is None else list(targets)
    if not any(t is tgt for t in targets):
        targets = [tgt] + targets
    g = _arc_geometry(b.shape, b.dt, b.dx, b.t0, tgt)
    others = [g if t is tgt else _arc_geometry(b.shape, b.dt, b.dx, b.t0, t) for t in targets]
    bg = _background(b.shape, others)
    return g, bg


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


CONTRAST_DECIMALS = 12


def contrast_from_amplitudes(a_sig: float, a_bg: float) -> float:
    """(A_sig - A_bg) / (A_sig + A_bg), rounded to 12 decimals.

    Rounding keeps decimal boundary inputs on the boundary (0.6 vs 0.4 gives
    0.2, not 0.19999999999999996).
    """
    total = a_sig + a_bg
    return 0.0 if total == 0 else round((a_sig - a_bg) / total, CONTRAST_DECIMALS)


def scr_from_energies(e_sig: float, e_clut: float) -> float:
    """10 log10(E_sig / E_clut); +inf for zero clutter, -inf for no signal energy."""
    if e_clut <= 0:
        return math.inf
    if e_sig <= 0:
        return -math.inf
    return 10.0 * math.log10(e_sig / e_clut)


def _contrast(a: np.ndarray, band: np.ndarray, bg: np.ndarray) -> float:
    if not bg.any():
        raise WavefieldError("background region is empty")
    return contrast_from_amplitudes(float(np.abs(a[band]).max()), float(np.abs(a[bg]).mean()))


def _energies(a: np.ndarray, band: np.ndarray, bg: np.ndarray) -> Tuple[float, float]:
    if not bg.any():
        raise WavefieldError("background region is empty")
    e_clut = float(np.mean(a[bg] ** 2))
    live = a[band]
    live = live[live != 0]  # exact zeros are fragmentation dropouts
    e_band = float(np.mean(live ** 2)) if live.size else 0.0
    return e_band - e_clut, e_clut


def _continuity(a: np.ndarray, g: _ArcGeometry) -> float:
    n_t = a.shape[0]

    def window_max(col):
        c = g.center[col]
        lo, hi = max(0, c - CONTINUITY_WINDOW), min(n_t, c + CONTINUITY_WINDOW + 1)
        return float(np.abs(a[lo:hi, col]).max())

    ref = window_max(g.apex)
    maxima = np.array([window_max(j) for j in g.span])
    # a column with no response at all never survives, even against a dead apex
    alive = (maxima >= CONTINUITY_FRACTION * ref) & (maxima > 0)
    return float(np.count_nonzero(alive)) / g.span.size


def measure_contrast(b: BScan, tgt: TargetAnnotation, targets=None) -> float:
    """(A_sig - A_bg) / (A_sig + A_bg): band peak vs mean background magnitude."""
    g, bg = _geoms(b, tgt, targets)
    return _contrast(b.samples.astype(np.float64), g.band, bg)


def measure_scr(b: BScan, tgt: TargetAnnotation, targets=None) -> float:
    """Signal-to-clutter ratio (dB) of one target's arc band against the background.

    Target energy is the band mean-square minus the background mean-square,
    so clutter lying under the arc is not counted as signal.
    """
    g, bg = _geoms(b, tgt, targets)
    return scr_from_energies(*_energies(b.samples.astype(np.float64), g.band, bg))


def measure_continuity(b: BScan, tgt: TargetAnnotation) -> float:
    """Fraction of spanned columns whose arc window peak reaches 0.2x the apex peak."""
    g = _arc_geometry(b.shape, b.dt, b.dx, b.t0, tgt)
    return _continuity(b.samples.astype(np.float64), g)


def classify_weak_signal(contrast: float, scr_db: float, continuity: float, depth_m: float,
                         dissipation_db: float, thresholds: WeakSignalThresholds = THRESHOLDS
                         ) -> WeakSignalReport:
    flags = set()
    if contrast < thresholds.contrast:
        flags.add("low_contrast")
    if scr_db < thresholds.scr_db:
        flags.add("clutter_dominance")
    if continuity < thresholds.continuity:
        flags.add("geometric_atrophy")
    if depth_m > thresholds.depth_m and dissipation_db > thresholds.dissipation_db:
        flags.add("deep_attenuated")
    return WeakSignalReport(contrast, scr_db, continuity, dissipation_db, depth_m, frozenset(flags))


def measure_report(b: BScan, tgt: TargetAnnotation, targets=None) -> WeakSignalReport:
    g, bg = _geoms(b, tgt, targets)
    a = b.samples.astype(np.float64)
    return classify_weak_signal(_contrast(a, g.band, bg), scr_from_energies(*_energies(a, g.band, bg)),
                                _continuity(a, g), tgt.depth, measure_dissipation(tgt))


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


@dataclass
class Grid:
    n_t: int = 256
    n_x: int = 96
    dt: float = 0.2  # ns
    dx: float = 0.02  # m
    t0: float = 0.0  # ns

    def __post_init__(self):
        if self.n_t < 1 or self.n_x < 1 or not (self.dt > 0 and self.dx > 0):
            raise WavefieldError("grid needs positive dimensions and spacings")


@dataclass
class ClutterConfig:
    """``scr_target_db`` drives the scale by bisection; otherwise ``scale`` is used as is."""

    scr_target_db: Optional[float] = None
    layered_fraction: float = 0.3
    scale: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.layered_fraction <= 1.0:
            raise WavefieldError("layered_fraction must lie in [0, 1]")
        if self.scale < 0:
            raise WavefieldError("clutter scale must be non-negative")


@dataclass
class FragConfig:
    continuity_target: Optional[float] = None
    min_run: int = 3
    max_run: int = 8

    def __post_init__(self):
        if self.continuity_target is not None and not 0.0 <= self.continuity_target <= 1.0:
            raise WavefieldError("continuity target must lie in [0, 1]")
        if not 1 <= self.min_run <= self.max_run:
            raise WavefieldError("invalid run length range")


SCR_TOLERANCE_DB = 0.5
CONTINUITY_TOLERANCE = 0.05
_MAX_ROUNDS = 12


def deposit_targets(targets: Sequence[TargetAnnotation], grid: Grid, fc: float) -> np.ndarray:
    """Noise-free sum of diffraction responses, float64 (T, X)."""
    t = grid.t0 + grid.dt * np.arange(grid.n_t)[:, None]
    x = grid.dx * np.arange(grid.n_x)[None, :]
    out = np.zeros((grid.n_t, grid.n_x))
    for tgt in targets:
        r = np.sqrt(tgt.depth ** 2 + (x - tgt.x0) ** 2)
        out += tgt.amplitude * np.exp(-2.0 * tgt.beta * r) * (tgt.depth / r) * ricker(t - 2.0 * r / tgt.velocity, fc)
    return out


def make_clutter(rng: np.random.Generator, grid: Grid, layered_fraction: float, fc: float) -> np.ndarray:
    """layered_fraction * layered bands + (1 - layered_fraction) * AR(1) trace noise.

    Both components are normalized to unit mean-square before mixing.
    """
    shape = (grid.n_t, grid.n_x)
    w = rng.standard_normal(shape)
    ar = lfilter([1.0], [1.0, -AR_COEFFICIENT], w, axis=0)
    ar /= np.sqrt(np.mean(ar ** 2))
    t = grid.t0 + grid.dt * np.arange(grid.n_t)[:, None]
    x = grid.dx * np.arange(grid.n_x)[None, :]
    width = grid.n_x * grid.dx
    n_layers = max(3, grid.n_t // 12)
    layered = np.zeros(shape)
    for _ in range(n_layers):
        tl = rng.uniform(t[0, 0], t[-1, 0])
        amp = rng.standard_normal()
        k, phase = rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        lateral = 1.0 + 0.3 * np.sin(2 * np.pi * k * x / width + phase)
        layered += amp * lateral * ricker(t - tl, 0.5 * fc)
    ms = np.mean(layered ** 2)
    if ms > 0:
        layered /= np.sqrt(ms)
    return layered_fraction * layered + (1.0 - layered_fraction) * ar


class _Composer:
    """Holds the fixed ingredients of one synthesis and recomposes on demand."""

    def __init__(self, signal, clutter, geoms, bg):
        self.signal, self.clutter, self.geoms, self.bg = signal, clutter, geoms, bg
        self.dropout = np.zeros(signal.shape, dtype=bool)
        self._refresh()

    def _refresh(self):
        # match clutter mean-square under each live arc band to the background's
        eq = np.ones(self.signal.shape)
        c_bg = float(np.mean(self.clutter[self.bg] ** 2)) if self.bg.any() else 0.0
        for g in self.geoms:
            live = g.band & ~self.dropout
            c_band = float(np.mean((self.clutter * eq)[live] ** 2)) if live.any() else 0.0
            if c_band > 0 and c_bg > 0:
                eq[live] *= math.sqrt(c_bg / c_band)
        self.shaped = self.clutter * eq

    def set_dropout(self, mask):
        self.dropout = mask
        self._refresh()

    def image(self, scale: float) -> np.ndarray:
        a = self.signal + scale * self.shaped
        a[self.dropout] = 0.0
        return a

    def mean_ratio(self, scale: float) -> float:
        a = self.image(scale)
        ratios = []
        for g in self.geoms:
            e_sig, e_clut = _energies(a, g.band, self.bg)
            ratios.append(math.inf if e_clut <= 0 else e_sig / e_clut)
        return float(np.mean(ratios))


def _tune_scale(comp: _Composer, target_db: float) -> float:
    goal = 10.0 ** (target_db / 10.0)
    base = float(np.sqrt(np.mean(comp.signal ** 2))) or 1.0
    lo, hi = 0.0, base
    for _ in range(200):
        if comp.mean_ratio(hi) < goal:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise WavefieldError(f"SCR target {target_db} dB unreachable")
    for _ in range(200):
        mid = 0.5 * (lo + hi) if lo == 0 else math.sqrt(lo * hi)
        r = comp.mean_ratio(mid)
        if r > 0 and abs(10.0 * math.log10(r) - target_db) < 0.02:
            return mid
        if r > goal:
            lo = mid
        else:
            hi = mid
    return mid


def _run_columns(geom: _ArcGeometry, zeroed: set, start: int, length: int) -> List[int]:
    span = set(int(j) for j in geom.span)
    cols = []
    j = start
    while len(cols) < length and j in span and j != geom.apex and j not in zeroed:
        cols.append(j)
        j += 1
    return cols


def _band_cells(geom: _ArcGeometry, cols) -> np.ndarray:
    mask = np.zeros(geom.band.shape, dtype=bool)
    mask[:, cols] = geom.band[:, cols]
    return mask


def _fragment(comp: _Composer, gi: int, scale: float, target: float, runs: List[List[int]],
              rng: np.random.Generator, frag: FragConfig) -> None:
    geom = comp.geoms[gi]

    def rebuild():
        mask = np.zeros(comp.signal.shape, dtype=bool)
        for g, owned in zip(comp.geoms, comp.all_runs):
            for r in owned:
                mask |= _band_cells(g, r)
        comp.set_dropout(mask)

    def cont():
        return _continuity(comp.image(scale), geom)

    while runs and cont() < target - CONTINUITY_TOLERANCE / 2:
        runs.pop()
        rebuild()
    attempts = 0
    while cont() > target + CONTINUITY_TOLERANCE / 2 and attempts < 200:
        attempts += 1
        zeroed = {j for r in runs for j in r}
        free = [int(j) for j in geom.span if j != geom.apex and int(j) not in zeroed]
        if not free:
            break
        start = free[int(rng.integers(len(free)))]
        length = int(rng.integers(frag.min_run, frag.max_run + 1))
        for ln in range(length, frag.min_run - 1, -1):
            cols = _run_columns(geom, zeroed, start, ln)
            if not cols:
                break
            runs.append(cols)
            rebuild()
            if cont() >= target - CONTINUITY_TOLERANCE / 2:
                break
            runs.pop()
            rebuild()


def synthesize_bscan(targets: Sequence[TargetAnnotation], grid: Grid = None,
                     clutter: ClutterConfig = None, frag: FragConfig = None, fc: float = 1.0,
                     seed: int = 0) -> Tuple[BScan, List[WeakSignalReport]]:
    """Generate a B-scan and the measured ground-truth report of each target.

    The clutter scale is found by bisection so that the (mean) measured SCR
    lands on ``clutter.scr_target_db``; arc column runs are then zeroed until
    each target's measured continuity reaches ``frag.continuity_target``.
    The two adjustments alternate until both hold.
    """
    grid = grid or Grid()
    clutter = clutter or ClutterConfig()
    frag = frag or FragConfig()
    targets = list(targets)
    if clutter.scr_target_db is not None and not targets:
        raise WavefieldError("SCR undefined: an SCR target needs at least one scatterer")
    if frag.continuity_target is not None and not targets:
        raise WavefieldError("continuity undefined without scatterers")
    rng = np.random.default_rng(seed)
    signal = deposit_targets(targets, grid, fc)
    base = make_clutter(rng, grid, clutter.layered_fraction, fc)
    geoms = [_arc_geometry((grid.n_t, grid.n_x), grid.dt, grid.dx, grid.t0, t) for t in targets]
    bg = _background((grid.n_t, grid.n_x), geoms)
    if targets and not bg.any():
        raise WavefieldError("no background cells remain outside the arcs; enlarge the grid")
    comp = _Composer(signal, base, geoms, bg)
    runs = [[] for _ in targets]
    comp.all_runs = runs

    def scr_ok(scale):
        if clutter.scr_target_db is None:
            return True
        r = comp.mean_ratio(scale)
        return r > 0 and abs(10 * math.log10(r) - clutter.scr_target_db) <= SCR_TOLERANCE_DB * 0.5

    def cont_ok(scale):
        if frag.continuity_target is None:
            return True
        a = comp.image(scale)
        return all(abs(_continuity(a, g) - frag.continuity_target) <= CONTINUITY_TOLERANCE * 0.5
                   for g in geoms)

    scale = clutter.scale
    checked_unfragmented = False
    for _ in range(_MAX_ROUNDS):
        if clutter.scr_target_db is not None:
            scale = _tune_scale(comp, clutter.scr_target_db)
        if frag.continuity_target is not None:
            if not checked_unfragmented:
                a = comp.image(scale)
                for g in geoms:
                    c = _continuity(a, g)
                    if frag.continuity_target > c + CONTINUITY_TOLERANCE:
                        raise WavefieldError(
                            f"continuity target {frag.continuity_target} above unfragmented value {c:.3f}")
                checked_unfragmented = True
            for gi in range(len(targets)):
                _fragment(comp, gi, scale, frag.continuity_target, runs[gi], rng, frag)
        if scr_ok(scale) and cont_ok(scale):
            break
    else:
        raise WavefieldError("SCR and continuity targets could not be met together")

    b = BScan(comp.image(scale), grid.dt, grid.dx, grid.t0)
    reports = [measure_report(b, t, targets) for t in targets]
    return b, reports
