"""Frame construction, curvature extraction, finite-difference kernels."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thinrod.errors import FrenetUndefined, InvalidCurve
from thinrod.geometry import (
    CurveSpec,
    build_frame,
    curvatures_from_frame,
    diff4,
    fd_weights,
    frame_ode_residual,
    frenet_consistency_check,
)


def test_fd_weights_polynomial_exactness():
    x = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    z = 1.7
    for m in (1, 2, 3):
        w = fd_weights(x, z, m)
        for deg in range(5):
            val = np.dot(w, x**deg)
            d = deg
            exact = 0.0
            if deg >= m:
                exact = np.prod(np.arange(d, d - m, -1)) * z ** (d - m)
            assert abs(val - exact) < 1e-10 * max(1.0, abs(exact))


@pytest.mark.parametrize("order", [1, 2, 3])
def test_diff4_fourth_order(order):
    errs = []
    for M in (40, 80):
        x = np.linspace(0.0, 2.0, M)
        f = np.sin(x)
        d = diff4(f, x[1] - x[0], order=order)
        exact = np.sin(x + order * np.pi / 2)
        errs.append(np.abs(d - exact).max())
    assert errs[0] / errs[1] > 12.0


def test_straight_frame_trivial():
    fr = build_frame(CurveSpec("straight", s0=np.pi), 64)
    assert np.all(fr.kappa1 == 0.0)
    assert np.all(fr.kappa2 == 0.0)
    assert np.all(fr.kappa3 == 0.0)
    assert np.abs(fr.tau - fr.tau[0]).max() == 0.0
    assert frame_ode_residual(fr) < 1e-13


def test_straight_twist_constant_rate():
    c = 0.7
    fr = build_frame(CurveSpec("straight", s0=np.pi, twist="linear", twist_rate=c), 64)
    assert np.all(fr.kappa1 == 0.0)
    assert np.all(fr.kappa2 == 0.0)
    assert np.abs(fr.kappa3 - c).max() < 1e-6
    assert np.abs(fr.alpha - c * fr.s_grid).max() < 1e-14


def test_arc_curvature_and_inward_normal():
    R = 2.0
    fr = build_frame(CurveSpec("circular_arc", s0=3.0, radius=R), 256)
    assert np.abs(fr.kappa1 - 1.0 / R).max() < 1e-7
    assert np.abs(fr.kappa2).max() < 1e-7
    assert np.abs(fr.kappa3).max() < 1e-7
    # eta(0) points from r(0) toward the arc center
    assert np.abs(fr.eta[0] - np.array([0.0, 1.0, 0.0])).max() < 1e-10


def test_helix_transport_minimizes_rotation():
    a, b = 1.0, 0.5
    kappa = a / (a**2 + b**2)
    fr = build_frame(CurveSpec("helix", s0=8.0, a=a, b=b), 256)
    assert np.abs(fr.kappa1**2 + fr.kappa2**2 - kappa**2).max() < 1e-6
    assert np.abs(fr.kappa3).max() < 1e-6


def test_frame_ode_residual_refines():
    spec = CurveSpec("helix", s0=8.0, a=1.0, b=0.5)
    r1 = frame_ode_residual(build_frame(spec, 128))
    r2 = frame_ode_residual(build_frame(spec, 256))
    assert r1 / r2 >= 3.0


def test_frenet_consistency_helix():
    a, b = 1.0, 0.5
    fr = build_frame(CurveSpec("helix", s0=8.0, a=a, b=b), 256)
    rep = frenet_consistency_check(fr)
    assert rep.max_curvature_dev < 1e-5
    assert rep.max_torsion_dev < 1e-5
    kappa = a / (a**2 + b**2)
    assert abs(rep.kappa_min - kappa) < 1e-6
    assert abs(rep.kappa_max - kappa) < 1e-6


def test_frenet_consistency_twisted_arc():
    fr = build_frame(
        CurveSpec("circular_arc", s0=3.0, radius=2.0, twist="linear", twist_rate=0.4),
        256,
    )
    rep = frenet_consistency_check(fr)
    assert rep.max_curvature_dev < 1e-5
    assert rep.max_torsion_dev < 1e-5


def test_frenet_undefined_for_straight():
    fr = build_frame(CurveSpec("straight", s0=np.pi), 64)
    with pytest.raises(FrenetUndefined):
        frenet_consistency_check(fr)


def test_sampled_circle_roundtrip():
    R = 2.0
    t = np.linspace(0.0, 1.5 * np.pi, 400)
    pts = np.stack([R * np.cos(t), R * np.sin(t), np.zeros_like(t)], axis=1)
    fr = build_frame(CurveSpec("sampled", points=pts), 256)
    assert abs(fr.s0 - 1.5 * np.pi * R) < 1e-6 * fr.s0
    k1, k2, k3 = curvatures_from_frame(fr)
    assert np.abs(k1**2 + k2**2 - 1.0 / R**2).max() < 1e-4


def test_sampled_self_intersection_rejected():
    t = np.linspace(0.0, 2 * np.pi, 200)
    pts = np.stack([np.sin(t), np.sin(t) * np.cos(t), np.zeros_like(t)], axis=1)
    with pytest.raises(InvalidCurve):
        build_frame(CurveSpec("sampled", points=pts), 64)


def test_grid_too_coarse():
    with pytest.raises(InvalidCurve):
        build_frame(CurveSpec("straight", s0=1.0), 8)


def test_tabulated_twist_shape_checked():
    spec = CurveSpec(
        "straight", s0=1.0, twist="tabulated", twist_values=np.zeros(10)
    )
    with pytest.raises(InvalidCurve):
        build_frame(spec, 32)
    vals = np.linspace(0.0, 0.3, 32) ** 2
    fr = build_frame(
        CurveSpec("straight", s0=1.0, twist="tabulated", twist_values=vals), 32
    )
    assert np.abs(fr.alpha - vals).max() == 0.0


@settings(deadline=None, max_examples=20)
@given(R=st.floats(0.5, 5.0), frac=st.floats(0.3, 1.2))
def test_arc_curvature_property(R, frac):
    fr = build_frame(CurveSpec("circular_arc", s0=frac * np.pi * R, radius=R), 64)
    assert np.abs(fr.kappa1 - 1.0 / R).max() < 1e-5 / R
    assert np.abs(fr.kappa2).max() < 1e-5 / R
