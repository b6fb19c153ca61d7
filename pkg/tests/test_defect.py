import numpy as np
import pytest

from convint.calculus import grad_array
from convint.defect import (
    COMPONENT_KINDS,
    DefectState,
    assemble_R1,
    check_solenoidal,
    component_report,
    diffusion_augment,
    materialize_step,
    residual_check,
    samplewise_norms,
)
from convint.errors import DomainError, InfeasibleError, SolenoidalityError
from convint.mikado import MikadoParams
from convint.scheme import build_step, manufactured_seed, plan_exponents
from convint.torus_grid import GridSpec, TimeField, TimeGrid


@pytest.fixture(scope="module")
def assembly():
    g = GridSpec(2, 128)
    seed = manufactured_seed(g, TimeGrid(1.0, 8))
    return build_step(seed, 0.5, 1.0, 1.5, MikadoParams(1, 1.0, 1.0, 8), 3)


def test_seed_satisfies_equation_exactly():
    seed = manufactured_seed(GridSpec(2, 64), TimeGrid(1.0, 8))
    assert residual_check(seed)["relative"].max() < 1e-12
    assert residual_check(seed)["div_u_relative"].max() < 1e-14


def test_components_sum_to_new_defect(assembly):
    s = assembly.at(3)
    assert set(s.components) == set(COMPONENT_KINDS)
    np.testing.assert_allclose(s.R1, -sum(s.components.values()), atol=1e-12)
    R1 = assemble_R1({kind: assembly.component(kind) for kind in COMPONENT_KINDS})
    np.testing.assert_allclose(R1.snapshot(3), s.R1, atol=1e-12)


def test_assemble_needs_every_component(assembly):
    with pytest.raises(DomainError):
        assemble_R1([assembly.component("chi")])
    with pytest.raises(DomainError):
        assembly.component("bogus")


def test_step_solves_equation_with_exact_derivatives(assembly):
    new = materialize_step(assembly)
    rep = residual_check(new, "auto")
    assert rep["relative"].max() < 1e-8
    assert rep["div_u_relative"].max() < 1e-9
    check_solenoidal(new)


def test_inactive_samples_keep_seed(assembly):
    new = materialize_step(assembly)
    for k in range(assembly.state.timegrid.K + 1):
        if not assembly.active(k):
            np.testing.assert_array_equal(new.rho.snapshot(k), assembly.state.rho.snapshot(k))
    assert new.meta["active_samples"] == [k for k in range(9) if assembly.active(k)]


def test_compressible_velocity_is_flagged():
    g, tg = GridSpec(2, 32), TimeGrid(1.0, 8)
    x = g.coords
    u = np.stack([np.broadcast_to(np.sin(2 * np.pi * x[0]), g.shape), np.zeros(g.shape)])
    rho = TimeField(tg, g, 0, lambda k: np.ones(g.shape), lambda k: np.zeros(g.shape))
    st = DefectState(rho, TimeField(tg, g, 1, lambda k: u), TimeField(tg, g, 1, lambda k: np.zeros_like(u)))
    with pytest.raises(SolenoidalityError):
        check_solenoidal(st)


def test_diffusion_augment_needs_diffusion_plan(assembly):
    new = materialize_step(assembly)
    with pytest.raises(InfeasibleError):
        diffusion_augment(new, assembly.state.rho, plan_exponents(1.5, 1, 2))


def test_diffusion_augment_moves_laplacian_into_defect():
    g = GridSpec(3, 32)
    seed = manufactured_seed(g, TimeGrid(1.0, 8), equation="diffusion")
    assert residual_check(seed, diffusion=True)["relative"].max() < 1e-12
    plan = plan_exponents(2.0, 1.0, 3, "diffusion")
    shifted = DefectState(TimeField(seed.timegrid, g, 0, lambda k: seed.rho.snapshot(k) * 1.1),
                          seed.u, seed.R)
    aug = diffusion_augment(shifted, seed.rho, plan)
    k = 2
    diff = aug.R.snapshot(k) - seed.R.snapshot(k)
    np.testing.assert_allclose(diff, grad_array(g, 0.1 * seed.rho.snapshot(k)), atol=1e-12)


def test_component_report_records(assembly):
    recs = component_report(assembly, samples=[3, 4])
    assert {r["kind"] for r in recs} == set(COMPONENT_KINDS)
    assert all(r["pass"] and r["l1_norm"] >= 0 for r in recs)


def test_samplewise_norms_shape(assembly):
    assert samplewise_norms(assembly.state, "R", 1).shape == (9,)
