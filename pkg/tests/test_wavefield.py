import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsanet import wavefield as wf
from wsanet.errors import WavefieldError
from wsanet.wavefield import (THRESHOLDS, BScan, ClutterConfig, FragConfig, Grid, TargetAnnotation,
                              classify_weak_signal, contrast_from_amplitudes, hyperbola_travel_time,
                              measure_contrast, measure_continuity, measure_dissipation, measure_scr,
                              ricker, scr_from_energies, synthesize_bscan)


# -- physics ------------------------------------------------------------------

def test_ricker_peak_zeros_symmetry():
    for fc in (0.5, 1.0, 1.7):
        assert ricker(0.0, fc) == 1.0
        t0 = 1.0 / (math.sqrt(2.0) * math.pi * fc)
        assert abs(ricker(t0, fc)) < 1e-15 and abs(ricker(-t0, fc)) < 1e-15
        t = np.linspace(-3, 3, 101)
        np.testing.assert_allclose(ricker(t, fc), ricker(-t, fc), atol=1e-15)
    with pytest.raises(WavefieldError):
        ricker(0.0, 0.0)


def test_travel_time_closed_forms():
    tgt = TargetAnnotation(x0=1.0, depth=0.5, eps_r=9.0)
    assert tgt.velocity == pytest.approx(0.1, rel=1e-15)
    assert hyperbola_travel_time(1.0, tgt) == pytest.approx(10.0, rel=1e-14)
    assert hyperbola_travel_time(2.2, tgt) == pytest.approx(26.0, rel=1e-14)
    assert hyperbola_travel_time(-0.2, tgt) == pytest.approx(26.0, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(0.01, 3), st.floats(1, 25), st.floats(0, 2))
def test_travel_time_even_about_apex(x0, d, eps, delta):
    tgt = TargetAnnotation(x0=x0, depth=d, eps_r=eps)
    assert hyperbola_travel_time(x0 + delta, tgt) == pytest.approx(hyperbola_travel_time(x0 - delta, tgt), rel=1e-14)
    assert hyperbola_travel_time(x0 + delta, tgt) >= hyperbola_travel_time(x0, tgt)


def test_annotation_invariants():
    for bad in (dict(depth=0.0), dict(eps_r=0.5), dict(beta=-1.0), dict(label="rock")):
        kw = dict(x0=0.0, depth=1.0)
        kw.update(bad)
        with pytest.raises(WavefieldError):
            TargetAnnotation(**kw)


def test_bscan_invariants():
    with pytest.raises(WavefieldError):
        BScan(np.zeros((0, 3)), 0.1, 0.1)
    with pytest.raises(WavefieldError):
        BScan(np.zeros((2, 2)), 0.0, 0.1)
    with pytest.raises(WavefieldError):
        BScan(np.array([[np.nan]]), 0.1, 0.1)


# -- dissipation / thresholds -------------------------------------------------

def test_dissipation_examples():
    assert measure_dissipation(TargetAnnotation(0, 2.0, beta=0.0)) == 0.0
    assert measure_dissipation(TargetAnnotation(0, 2.0, beta=1.1513)) == pytest.approx(40.0, abs=0.01)
    a = measure_dissipation(TargetAnnotation(0, 1.0, beta=0.7))
    assert measure_dissipation(TargetAnnotation(0, 2.0, beta=0.7)) == pytest.approx(2 * a, rel=1e-15)


def test_threshold_constants():
    assert (THRESHOLDS.contrast, THRESHOLDS.scr_db, THRESHOLDS.continuity, THRESHOLDS.depth_m,
            THRESHOLDS.dissipation_db) == (0.2, -5.0, 0.6, 1.5, 40.0)


def test_classifier_examples():
    r = classify_weak_signal(0.5, 3.0, 0.9, 0.8, 5.0)
    assert r.flags == frozenset() and not r.is_weak
    r = classify_weak_signal(0.5, -6.0, 0.9, 0.8, 5.0)
    assert r.flags == {"clutter_dominance"} and r.is_weak
    r = classify_weak_signal(0.5, 3.0, 0.9, 1.6, 41.0)
    assert r.flags == {"deep_attenuated"}
    # deep alone or lossy alone is not enough
    assert not classify_weak_signal(0.5, 3.0, 0.9, 1.6, 39.0).is_weak
    assert not classify_weak_signal(0.5, 3.0, 0.9, 1.4, 60.0).is_weak


def test_classifier_boundaries_are_strict():
    assert classify_weak_signal(0.2, -5.0, 0.6, 1.5, 40.0).flags == frozenset()
    r = classify_weak_signal(0.19, -5.01, 0.59, 1.51, 40.01)
    assert r.flags == {"low_contrast", "clutter_dominance", "geometric_atrophy", "deep_attenuated"}


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(-30, 30), st.floats(0, 1), st.floats(0.1, 3), st.floats(0, 80))
def test_is_weak_iff_any_flag(c, s, k, d, diss):
    r = classify_weak_signal(c, s, k, d, diss)
    assert r.is_weak == bool(r.flags)


# -- contrast / SCR formulas --------------------------------------------------

def test_contrast_formula_examples():
    assert contrast_from_amplitudes(0.3, 0.3) == 0.0
    assert contrast_from_amplitudes(0.7, 0.0) == 1.0
    assert contrast_from_amplitudes(0.0, 0.0) == 0.0
    assert contrast_from_amplitudes(0.6, 0.4) == 0.2
    assert "low_contrast" not in classify_weak_signal(contrast_from_amplitudes(0.6, 0.4), 0, 1, 0.5, 0).flags


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1e6), st.floats(0, 1e6))
def test_contrast_in_unit_interval(a, b):
    assert -1.0 <= contrast_from_amplitudes(a, b) <= 1.0


def test_scr_formula_examples():
    assert scr_from_energies(2.0, 2.0) == 0.0
    assert scr_from_energies(10.0, 1.0) == pytest.approx(10.0, abs=1e-12)
    assert scr_from_energies(1.0, 0.0) == math.inf
    assert scr_from_energies(-1.0, 1.0) == -math.inf


# -- measurements on constructed scans ----------------------------------------

def clean_scan(tgt=None, grid=None, fc=1.0):
    grid = grid or Grid()
    tgt = tgt or TargetAnnotation(x0=0.96, depth=0.6, eps_r=6.0)
    return synthesize_bscan([tgt], grid, fc=fc)[0], tgt


def test_clean_scan_reference():
    b, tgt = clean_scan()
    assert measure_continuity(b, tgt) == 1.0
    assert measure_contrast(b, tgt) > 0.99
    assert measure_scr(b, tgt) > 60


def _zero_columns(b, tgt, frac):
    g = wf._arc_geometry(b.shape, b.dt, b.dx, b.t0, tgt)
    span = [int(j) for j in g.span if j != g.apex]
    n_zero = round(frac * g.span.size)
    s = b.samples.copy()
    s[:, span[:n_zero]] = 0.0
    return BScan(s, b.dt, b.dx, b.t0), g.span.size, n_zero


def test_continuity_boundary_forty_percent_zeroed():
    # 256x100 grid puts the whole arc in the window: 100 spanned columns
    grid = Grid(n_t=256, n_x=100)
    b, tgt = clean_scan(TargetAnnotation(x0=1.0, depth=0.5, eps_r=4.0), grid)
    z, n_span, n_zero = _zero_columns(b, tgt, 0.4)
    assert n_span == 100 and n_zero == 40
    c = measure_continuity(z, tgt)
    assert c == 0.6
    assert "geometric_atrophy" not in classify_weak_signal(1.0, 10.0, c, 0.5, 0.0).flags


def test_continuity_fully_zeroed_arc():
    b, tgt = clean_scan()
    g = wf._arc_geometry(b.shape, b.dt, b.dx, b.t0, tgt)
    s = b.samples.copy()
    s[:, g.span] = 0.0
    assert measure_continuity(BScan(s, b.dt, b.dx), tgt) == 0.0


def test_contrast_constructed_bands():
    shape = (120, 20)
    tgt = TargetAnnotation(x0=0.2, depth=0.3, eps_r=9.0)
    g = wf._arc_geometry(shape, 0.5, 0.02, 0.0, tgt)
    bg = wf._background(shape, [g])
    s = np.zeros(shape)
    s[bg] = 0.4
    s[g.band] = 0.4
    s[g.center[g.apex], g.apex] = 0.6
    c = measure_contrast(BScan(s, 0.5, 0.02), tgt)
    assert c == pytest.approx(0.2, abs=1e-6)  # float32 storage of 0.6 / 0.4
    s[g.band] = 0.4
    assert measure_contrast(BScan(s, 0.5, 0.02), tgt) == 0.0


def test_arc_outside_grid_rejected():
    b, _ = clean_scan()
    far = TargetAnnotation(x0=1.0, depth=50.0)
    with pytest.raises(WavefieldError):
        measure_contrast(b, far)
    with pytest.raises(WavefieldError):
        measure_continuity(b, far)


def test_measurements_are_bit_deterministic():
    b, [r] = synthesize_bscan([TargetAnnotation(0.9, 1.0)], clutter=ClutterConfig(-3.0), frag=FragConfig(0.7),
                              seed=4)
    t = TargetAnnotation(0.9, 1.0)
    assert [measure_scr(b, t) for _ in range(3)] == [measure_scr(b, t)] * 3
    assert measure_contrast(b, t) == measure_contrast(b, t)
    assert measure_continuity(b, t) == measure_continuity(b, t)


# -- generator ----------------------------------------------------------------

def test_generator_deterministic_in_seed():
    t = [TargetAnnotation(0.9, 1.0, eps_r=5.0)]
    a = synthesize_bscan(t, clutter=ClutterConfig(0.0), frag=FragConfig(0.8), seed=3)[0]
    b = synthesize_bscan(t, clutter=ClutterConfig(0.0), frag=FragConfig(0.8), seed=3)[0]
    c = synthesize_bscan(t, clutter=ClutterConfig(0.0), frag=FragConfig(0.8), seed=4)[0]
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.samples.tobytes() != c.samples.tobytes()


@pytest.mark.parametrize("scr", [-10.0, -5.0, 0.0, 7.5])
def test_generator_hits_scr_target(scr):
    t = TargetAnnotation(0.95, 1.0, eps_r=6.0)
    b, [r] = synthesize_bscan([t], clutter=ClutterConfig(scr), seed=11)
    assert abs(measure_scr(b, t) - scr) <= 0.5
    assert r.scr_db == measure_scr(b, t)


@pytest.mark.parametrize("cont", [0.3, 0.55, 0.9])
def test_generator_hits_continuity_target(cont):
    t = TargetAnnotation(0.95, 1.0, eps_r=6.0)
    b, [r] = synthesize_bscan([t], clutter=ClutterConfig(2.0), frag=FragConfig(cont), seed=12)
    assert abs(measure_continuity(b, t) - cont) <= 0.05


def test_generator_multiple_targets():
    ts = [TargetAnnotation(0.5, 0.6), TargetAnnotation(1.4, 1.0, label="void")]
    b, reports = synthesize_bscan(ts, clutter=ClutterConfig(0.0), frag=FragConfig(0.7), seed=3)
    assert len(reports) == 2
    for t, r in zip(ts, reports):
        assert abs(r.continuity - 0.7) <= 0.05


def test_generator_errors():
    with pytest.raises(WavefieldError, match="SCR undefined"):
        synthesize_bscan([], clutter=ClutterConfig(0.0, scale=1.0))
    # strong attenuation starves the arc flanks: the clean arc is already patchy
    lossy = TargetAnnotation(0.96, 0.5, eps_r=4.0, beta=3.0)
    assert synthesize_bscan([lossy])[1][0].continuity < 0.6
    with pytest.raises(WavefieldError, match="above unfragmented"):
        synthesize_bscan([lossy], frag=FragConfig(0.9))
    with pytest.raises(WavefieldError):
        ClutterConfig(layered_fraction=1.5)
    with pytest.raises(WavefieldError):
        FragConfig(continuity_target=1.2)


def test_zero_clutter_scale_has_infinite_or_huge_scr():
    b, [r] = synthesize_bscan([TargetAnnotation(0.95, 1.0)])
    assert r.scr_db > 100 and r.contrast > 0.99
