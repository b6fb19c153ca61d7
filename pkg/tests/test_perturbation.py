import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convint.calculus import div_array
from convint.errors import DomainError
from convint.mikado import MikadoParams, build_lines, build_mikado_set, build_profiles
from convint.perturbation import (
    build_coefficients,
    build_cutoffs,
    build_perturbations,
    perturbation_estimates,
    smooth_step,
    smooth_step_curvature,
    smooth_step_slope,
)
from convint.scheme import manufactured_seed, theorem13_seed
from convint.torus_grid import GridSpec, TimeGrid


@given(st.floats(-2, 3))
def test_smooth_step_range_and_symmetry(x):
    v = float(smooth_step(np.array([x]))[0])
    assert 0.0 <= v <= 1.0
    assert v + float(smooth_step(np.array([1 - x]))[0]) == pytest.approx(1.0, abs=1e-12)


def test_smooth_step_derivatives():
    x = np.linspace(0.02, 0.98, 97)
    h = 1e-6
    fd1 = (smooth_step(x + h) - smooth_step(x - h)) / (2 * h)
    fd2 = (smooth_step_slope(x + h) - smooth_step_slope(x - h)) / (2 * h)
    np.testing.assert_allclose(smooth_step_slope(x), fd1, atol=1e-6)
    np.testing.assert_allclose(smooth_step_curvature(x), fd2, atol=1e-4)
    assert np.all(np.diff(smooth_step(x)) > 0)


@pytest.fixture(scope="module")
def step_parts():
    g = GridSpec(2, 128)
    seed = manufactured_seed(g, TimeGrid(1.0, 8))
    cut = build_cutoffs(seed.R, 0.5)
    co = build_coefficients(seed.R, cut, 1.0, 1.5)
    lines = build_lines(2)
    ms = build_mikado_set(build_profiles(lines, 1.5), lines, MikadoParams(1, 1.0, 1.0, 8))
    return seed, cut, co, build_perturbations(co, ms, 3)


def test_cutoff_plateaus(step_parts):
    seed, cut, _, _ = step_parts
    R = seed.R.snapshot(3)
    chi = cut.chi(3)
    assert np.all(chi[np.abs(R) <= cut.lower] == 0)
    assert np.all(chi[np.abs(R) >= cut.upper] == 1)


def test_cutoff_rejects_bad_delta(step_parts):
    with pytest.raises(DomainError):
        build_cutoffs(step_parts[0].R, 0.0)


def test_coefficients_recombine_to_cut_defect(step_parts):
    seed, cut, co, _ = step_parts
    c = co.at(2)
    np.testing.assert_allclose(c.a * c.b, c.chi ** 2 * seed.R.snapshot(2), atol=1e-12)
    np.testing.assert_allclose(c.ab, c.a * c.b, atol=1e-12)


def test_coefficient_time_derivative(step_parts):
    seed, cut, _, _ = step_parts
    # ∂_t(a b) against a centred difference of the closed-form defect on a fine time grid
    g = seed.grid
    fine = manufactured_seed(g, TimeGrid(1.0, 4096))
    cof = build_coefficients(fine.R, build_cutoffs(fine.R, 0.5), 1.0, 1.5)
    k = 1024
    fd = (cof.at(k + 1).ab - cof.at(k - 1).ab) / (2 * fine.timegrid.dt)
    assert np.max(np.abs(fd - cof.at(k).dab)) < 1e-4 * np.max(np.abs(cof.at(k).dab))


def test_corrected_field_is_solenoidal(step_parts):
    _, _, _, bundle = step_parts
    s = bundle.at(4)
    u = s.u_increment
    ratio = np.sqrt(np.mean(div_array(bundle.grid, u) ** 2)) / np.sqrt(np.mean(u ** 2))
    assert ratio < 1e-12
    assert s.alias_fraction < 1e-3


def test_increments_have_zero_mean(step_parts):
    s = step_parts[3].at(5)
    assert abs(s.rho_increment.mean()) < 1e-12
    assert abs(s.drho_increment.mean()) < 1e-10


def test_inactive_sample_is_zero():
    g = GridSpec(2, 128)
    seed = theorem13_seed(g, TimeGrid(1.0, 8))
    cut = build_cutoffs(seed.R, 1.0)
    co = build_coefficients(seed.R, cut, 0.1, 1.5)
    lines = build_lines(2)
    ms = build_mikado_set(build_profiles(lines, 1.5), lines, MikadoParams(1, 1.0, 1.0, 8))
    bundle = build_perturbations(co, ms, 3)
    assert not bundle.active(0)
    assert np.all(bundle.at(0).rho_increment == 0)


def test_estimates_report_every_quantity(step_parts):
    rep = perturbation_estimates(step_parts[3], step_parts[2], 4, 1.0)
    assert set(rep["measured"]) == set(rep["predicted_scale"])
    assert all(np.isfinite(v) for v in rep["measured"].values())
