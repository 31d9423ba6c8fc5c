from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biplanar3d.morphometry import (boundary_points, centerline_scores, femur_params, fit_sphere,
                                    mean_curve_distance, measure, optimal_axial_shift,
                                    polyline_length, resample_polyline, rib_centerline, tube_dice)
from biplanar3d.phantoms import PhantomSpec, RibGeometry, _grid, _tube_mask, generate_phantom, rib_geometries
from biplanar3d.volume import LabelVolume


@given(st.floats(1.0, 50.0), st.tuples(*[st.floats(-20, 20)] * 3), st.integers(0, 2 ** 16))
def test_fit_sphere_recovers_exact_sphere(r, c, seed):
    d = np.random.default_rng(seed).standard_normal((40, 3))
    pts = np.array(c) + r * d / np.linalg.norm(d, axis=1, keepdims=True)
    centre, radius = fit_sphere(pts)
    assert abs(radius - r) < 1e-6 * max(1.0, r)
    np.testing.assert_allclose(centre, c, atol=1e-6)


def test_fit_sphere_rejects_degenerate_input():
    with pytest.raises(ValueError):
        fit_sphere(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        fit_sphere(np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)]))


def test_boundary_points_of_single_voxel():
    m = np.zeros((3, 3, 3), bool)
    m[1, 1, 1] = True
    pts = boundary_points(m, (1.0, 2.0, 1.0))
    assert len(pts) == 6
    centre = np.array([1.5, 3.0, 1.5])
    assert sorted(np.round(np.abs(pts - centre).sum(1), 9)) == [0.5, 0.5, 0.5, 0.5, 1.0, 1.0]


@pytest.mark.parametrize("R,nsa,sp", [(9.0, 125.0, 1.0), (11.0, 135.0, 0.8), (10.0, 130.0, 1.0)])
def test_femur_recovery(R, nsa, sp):
    dims = tuple(int(x / sp) for x in (72, 44, 96))
    spec = PhantomSpec("femur", 1, dims=dims, spacing=(sp,) * 3, head_radius=R, nsa=nsa,
                       neck_length=2.5 * R, neck_radius=0.5 * R, shaft_radius=0.6 * R)
    m = femur_params(generate_phantom(spec), 1)
    assert abs(m.fhr - R) <= 0.5
    assert abs(m.nsa - nsa) <= 2.0
    assert set(m.to_dict()) >= {"fhr_mm", "nsa_deg", "protocol"}


def test_femur_rejects_absent_or_blob():
    with pytest.raises(ValueError):
        femur_params(LabelVolume(np.zeros((8, 8, 8)), num_classes=1), 1)
    g = np.indices((12, 12, 12)) - 5.5
    ball = ((g ** 2).sum(0) <= 25).astype(np.uint16)
    with pytest.raises(ValueError):
        femur_params(LabelVolume(ball, num_classes=1), 1)


def _torus_volume(radius, span_deg, sp=1.0, tube=1.5):
    dims = (int(2.8 * radius / sp), int(2.8 * radius / sp), int(12 / sp))
    ext = np.array(dims) * sp
    rib = RibGeometry(0.5 * ext, radius, (0.0, math.radians(span_deg)), tube)
    gh, gw, gd = _grid(dims, (sp,) * 3)
    mask = _tube_mask(np.stack([gh, gw, gd], -1), rib)
    return LabelVolume(mask.astype(np.uint16), (sp,) * 3, 1), rib


@pytest.mark.parametrize("radius,span,sp", [(20.0, 90.0, 1.0), (25.0, 90.0, 0.8), (18.0, 120.0, 1.0)])
def test_quarter_torus_arc_length(radius, span, sp):
    vol, rib = _torus_volume(radius, span, sp)
    line = rib_centerline(vol, 1)
    assert abs(line.length / rib.arc_length - 1) <= 0.05
    # points lie near the generating arc
    assert mean_curve_distance(line.points, rib.points(400)) < 1.0


def test_ribcage_phantom_arc_lengths():
    spec = PhantomSpec("ribcage", 4, dims=(80, 56, 80), seed=3)
    vol = generate_phantom(spec)
    for c, rib in enumerate(rib_geometries(spec), start=1):
        assert abs(rib_centerline(vol, c).length / rib.arc_length - 1) <= 0.05


def test_centerline_runs_from_spine_side():
    spec = PhantomSpec("ribcage", 2, dims=(64, 48, 64), seed=1)
    vol = generate_phantom(spec)
    mid = 0.5 * vol.dims[0] * vol.spacing[0]
    for c in (1, 2):
        pts = rib_centerline(vol, c).points
        assert abs(pts[0, 0] - mid) < abs(pts[-1, 0] - mid)


def test_polyline_helpers():
    pts = np.array([[0.0, 0, 0], [3, 0, 0], [3, 4, 0]])
    assert polyline_length(pts) == 7.0
    r = resample_polyline(pts, 1.0)
    assert abs(polyline_length(r) - 7.0) < 1e-9
    np.testing.assert_allclose(np.linalg.norm(np.diff(r, axis=0), axis=1), 1.0)


def _arc(radius=20.0, n=200, z=0.0):
    th = np.linspace(0, math.pi / 2, n)
    return np.stack([radius * np.cos(th), radius * np.sin(th), np.full(n, z)], 1)


@settings(max_examples=12)
@given(st.floats(-8.0, 8.0))
def test_axial_shift_shows_up_in_lscd_error(shift):
    a, b = _arc(), _arc(z=shift)
    s = centerline_scores(b, a)
    assert abs(s.lscd_error - abs(shift)) <= 0.5
    assert abs(s.axial_shift + shift) <= 0.05
    assert s.nl_dice > 95.0  # tube voxelisation, not the shift, limits this


@given(st.integers(0, 2 ** 16))
def test_centerline_scores_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = _arc() + rng.normal(0, 0.3, (200, 3))
    b = _arc(radius=21.0, z=rng.uniform(-3, 3))
    ab, ba = centerline_scores(a, b), centerline_scores(b, a)
    assert math.isclose(ab.nl_dice, ba.nl_dice, abs_tol=1e-9)
    assert math.isclose(ab.lscd_error, ba.lscd_error, abs_tol=1e-9)
    assert math.isclose(ab.axial_shift, -ba.axial_shift, abs_tol=1e-9)


def test_optimal_shift_and_tube_dice():
    a = _arc()
    assert abs(optimal_axial_shift(a, a + np.array([0, 0, 4.0])) - 4.0) < 0.05
    assert tube_dice(a, a) == 100.0
    far = a + np.array([0, 0, 50.0])
    assert tube_dice(a, far) == 0.0


def test_measure_report_is_json():
    spec = PhantomSpec("ribcage", 2, dims=(64, 48, 64), seed=0)
    vol = generate_phantom(spec)
    rep = json.loads(measure(vol, [1, 2], reference=vol).to_json())
    assert set(rep["ribs"]) == {vol.class_names[1], vol.class_names[2]}
    for s in rep["scores"].values():
        assert s["nl_dice"] == 100.0
        assert s["lscd_error_mm"] == 0.0
