import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convint.errors import InfeasibleError, ParamError, ResolutionError
from convint.mikado import (
    MikadoParams,
    build_lines,
    build_mikado_set,
    build_profiles,
    conjugate,
    derive_constants,
    mean_of_product,
    mikado_norms,
    mikado_report,
    torus_distance,
    transverse_axis,
    verify_cancellation,
    verify_disjoint,
)
from convint.torus_grid import GridSpec, lp_array


def mset(d=2, p=1.5, params=(1, 1.0, 1.0, 4), sharpness=None):
    lines = build_lines(d)
    return build_mikado_set(build_profiles(lines, p, sharpness), lines, MikadoParams(*params))


# Line separation: moving points (s + 1/d, 0), (0, s + 2/d), ... at the same s.
# Brute-force scan over s gives sqrt(1/8) in 2D and sqrt(1/18) in 3D.
@pytest.mark.parametrize("d,dist", [(2, math.sqrt(1 / 8)), (3, math.sqrt(1 / 18))])
def test_line_separation(d, dist):
    lines = build_lines(d)
    assert lines.min_distance == pytest.approx(dist, abs=1e-6)
    prof = build_profiles(lines, 1.5 if d == 2 else 2.0)
    assert prof.r0 == pytest.approx(0.9 * 0.95 * dist / 2, rel=1e-6)


def test_support_radius_values():
    assert build_profiles(build_lines(2), 1.5).r0 == pytest.approx(0.1511, abs=1e-4)
    assert build_profiles(build_lines(3), 2.0).r0 == pytest.approx(0.1008, abs=1e-4)


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_torus_distance_symmetric_and_bounded(a, b):
    a, b = np.array(a), np.array(b)
    dab = torus_distance(a, b)
    assert dab == pytest.approx(torus_distance(b, a))
    assert 0 <= dab <= math.sqrt(2) / 2 + 1e-12


@pytest.mark.parametrize("d", [2, 3])
def test_profile_square_integrates_to_one(d):
    ms = mset(d, 2.0, (1, 1.0, 1.0, 2))
    assert mean_of_product(ms, 0, 0.3, GridSpec(d, 64 if d == 3 else 128)) == pytest.approx(1, abs=1e-6)


def test_transverse_axis():
    assert [transverse_axis(j) for j in range(3)] == [1, 0, 0]


@pytest.mark.parametrize("bad", [(0, 1.0, 1.0, 4), (2, 1.0, 1.0, 3), (1, 0.5, 1.0, 4),
                                 (1, 1.0, 0.0, 4), (1.5, 1.0, 1.0, 3)])
def test_params_validation(bad):
    with pytest.raises(ParamError):
        MikadoParams(*bad)


def test_resolution_guard():
    ms = mset(params=(2, 2.0, 1.0, 8))
    with pytest.raises(ResolutionError):
        ms.sample("theta", 0, 0.0, GridSpec(2, 128))
    ms.sample("theta", 0, 0.0, GridSpec(2, 256))


def test_constants_worked_instance():
    c = derive_constants(1.5, 1.0, 2, build_profiles(build_lines(2), 1.5))
    assert c.eps == pytest.approx(1 / 3)
    assert (c.a, c.b) == pytest.approx((4 / 3, 2 / 3))
    assert c.M > 0
    with pytest.raises(InfeasibleError):
        derive_constants(2.0, 2.0, 2, build_profiles(build_lines(2), 2.0))


def test_conjugate():
    assert conjugate(1.5) == pytest.approx(3.0)
    assert conjugate(1) == math.inf


@settings(max_examples=10, deadline=None)
@given(st.floats(0, 1))
def test_directions_never_overlap(t):
    ms = mset(params=(1, 2.0, 1.0, 4))
    assert verify_disjoint(ms, [t], GridSpec(2, 128)) == 0.0


@pytest.mark.parametrize("params", [(1, 1.0, 1.0, 4), (1, 2.0, 0.5, 8), (2, 1.0, 2.0, 8)])
def test_cancellation_identity(params):
    res = verify_cancellation(mset(params=params), 0.21, GridSpec(2, 256))
    assert max(res) < 1e-8


def test_closed_form_time_derivative_matches_difference():
    ms = mset(params=(1, 2.0, 1.5, 4))
    g = GridSpec(2, 128)
    h = 1e-5
    fd = (ms.theta(0, 0.3 + h, g.coords) - ms.theta(0, 0.3 - h, g.coords)) / (2 * h)
    exact = ms.dtheta_dt(0, 0.3, g.coords)
    assert np.max(np.abs(fd - exact)) < 1e-5 * np.max(np.abs(exact))


def test_divergence_of_w_matches_spectral():
    ms = mset(params=(1, 1.0, 1.0, 4))
    g = GridSpec(2, 256)
    w = ms.sample("w", 0, 0.1, g)
    from convint.calculus import div
    spectral = div(w).values
    exact = ms.sample("divw", 0, 0.1, g).values
    assert np.sqrt(np.mean((spectral - exact) ** 2)) < 1e-8 * np.sqrt(np.mean(exact ** 2))


@pytest.mark.parametrize("p", [1.5, 2.0])
def test_profile_norms_invariant_under_concentration(p):
    g = GridSpec(2, 512)
    vals = []
    for mu in (1.0, 2.0, 4.0, 8.0):
        pc = mset(p=p, params=(1, mu, 1.0, 4)).pieces(0, 0.0, g.coords)
        vals.append((lp_array(pc.phi, p), lp_array(pc.phit, conjugate(p))))
    vals = np.array(vals)
    assert np.all(np.abs(vals / vals[0] - 1) < 1e-4)


def test_norms_agree_with_reference_cell():
    ms = mset(params=(2, 2.0, 1.0, 8))
    rep = mikado_norms(ms, "w", "L1", 0.2, GridSpec(2, 512))
    assert rep.agree


def test_report_passes_on_resolved_grid():
    ms = mset(params=(1, 2.0, 1.0, 8))
    consts = derive_constants(1.5, 1.0, 2, ms.profiles)
    records = mikado_report(ms, GridSpec(2, 256), consts, 1.0)
    assert all(r["pass"] for r in records), [r for r in records if not r["pass"]]
