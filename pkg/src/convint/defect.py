"""The new defect field of one step and the continuity-defect residual.

A step adds (ϑ + ϑ_c + q + q_c, w + w_c) to (ρ_0, u_0).  The defect
R_1 = -(R^χ + R^time1 + R^quadr + R^lin + R^time2 + R^q + R^corr) is built so
that ∂_tρ_1 + div(ρ_1 u_1) = -div R_1 holds exactly up to discretization.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calculus import antidiv_bilinear_array, div_array, dk_array, grad_array, partial_array
from .errors import DomainError, InfeasibleError, MeanError, SolenoidalityError
from .mikado import MikadoSet
from .perturbation import CoefficientFields, PerturbationBundle, _LRU
from .torus_grid import (
    QUADRATURE_TOL,
    GridSpec,
    TimeField,
    TimeGrid,
    lp_array,
    time_derivative_array,
)

COMPONENT_KINDS = ("chi", "time1", "quadr", "lin", "time2", "q", "corr")
DIV_TOL = 1e-9


@dataclass
class DefectState:
    """(ρ, u, R) at every time sample, plus the parameters that produced it."""

    rho: TimeField
    u: TimeField
    R: TimeField
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> GridSpec:
        return self.rho.grid

    @property
    def timegrid(self) -> TimeGrid:
        return self.rho.timegrid


def _vec_norm(vec: np.ndarray) -> np.ndarray:
    return np.sqrt((vec ** 2).sum(axis=0))


def _antidiv(grid: GridSpec, values: np.ndarray) -> np.ndarray:
    """D^{-1}(f - mean f); the mean subtraction is the zero-mode projection."""
    return dk_array(grid, -1, values)


def _times_vec(scalar: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return scalar[None] * vec


@dataclass(frozen=True)
class StepSample:
    """Everything the step produces at one time sample."""

    active: bool
    drho: np.ndarray
    ddrho: np.ndarray
    du: np.ndarray
    components: dict
    R1: np.ndarray
    diagnostics: dict


class StepAssembly:
    """Per-sample evaluation of the seven defect components of one step."""

    def __init__(self, state: DefectState, bundle: PerturbationBundle,
                 coeffs: CoefficientFields, mikados: MikadoSet, N: int, quadr_order: int = 1):
        if bundle.grid != state.grid or bundle.timegrid != state.timegrid:
            raise DomainError("state and perturbations live on different grids")
        self.state = state
        self.bundle = bundle
        self.coeffs = coeffs
        self.mikados = mikados
        self.N = int(N)
        self.quadr_order = int(quadr_order)
        self._cache = _LRU(2)

    @property
    def grid(self) -> GridSpec:
        return self.state.grid

    def active(self, k: int) -> bool:
        return self.bundle.active(k)

    def at(self, k: int) -> StepSample:
        return self._cache.get(k, lambda: self._compute(k))

    def _compute(self, k: int) -> StepSample:
        grid, d = self.grid, self.grid.dim
        R0 = self.state.R.snapshot(k)
        co = self.coeffs.at(k)
        comps = {kind: np.zeros((d,) + grid.shape) for kind in COMPONENT_KINDS}
        for j in range(d):
            comps["chi"][j] = -(1.0 - co.chi[j] ** 2) * R0[j]
        if not self.active(k):
            zero = np.zeros(grid.shape)
            return StepSample(False, zero, zero, np.zeros((d,) + grid.shape), comps,
                              -comps["chi"], {})
        s = self.bundle.at(k)
        par = self.mikados.params
        lam, om = par.lam, par.omega
        rho0 = self.state.rho.snapshot(k)
        u0 = self.state.u.snapshot(k)
        time1 = np.zeros(grid.shape)
        lin_scalar = np.zeros(grid.shape)
        f_mean_gap = []
        for j, pc in enumerate(s.pieces):
            prod = pc.phi * pc.phit
            psi2 = pc.psi ** 2
            time1 += co.dab[j] * prod * psi2 / om
            lin_scalar += co.da[j] * pc.phi * pc.psi
            dab_j = partial_array(grid, co.ab[j], j)
            comps["quadr"] += antidiv_bilinear_array(grid, dab_j * prod, psi2 - 1.0, self.quadr_order)
            gap = float(prod.mean()) - 1.0
            f_mean_gap.append(gap)
            if abs(gap) > QUADRATURE_TOL:
                raise MeanError(f"profile product of direction {j} has grid mean 1{gap:+.3e}")
            comps["quadr"] += antidiv_bilinear_array(grid, dab_j, prod - 1.0, self.quadr_order)
            # The grid mean of φφ̃ is 1 only to quadrature accuracy; this term
            # carries the remainder so the identity stays exact on the grid.
            comps["quadr"][j] += gap * co.ab[j]
            comps["time2"] -= lam * om * antidiv_bilinear_array(grid, co.a[j] * pc.dphi, pc.psi, self.N)
        comps["time1"] = _antidiv(grid, time1)
        comps["lin"] = _antidiv(grid, lin_scalar) + _times_vec(s.theta, u0) + _times_vec(rho0, s.w)
        comps["q"] = _times_vec(s.q, u0 + s.w)
        comps["corr"] = _times_vec(rho0 + s.theta + s.q, s.wc)
        R1 = -sum(comps.values())
        return StepSample(True, s.rho_increment, s.drho_increment, s.u_increment, comps, R1,
                          {"profile_mean_gap": f_mean_gap, "alias_fraction": s.alias_fraction})

    def component(self, kind: str) -> TimeField:
        if kind not in COMPONENT_KINDS:
            raise DomainError(f"unknown defect component {kind!r}")
        return TimeField(self.state.timegrid, self.grid, 1, lambda k: self.at(k).components[kind])


def defect_component(kind: str, state: DefectState, bundle: PerturbationBundle,
                     coeffs: CoefficientFields, mikados: MikadoSet, N: int) -> TimeField:
    return StepAssembly(state, bundle, coeffs, mikados, N).component(kind)


def assemble_R1(components) -> TimeField:
    """R_1 = -Σ components, lazily per sample."""
    comps = list(components.values()) if isinstance(components, dict) else list(components)
    if len(comps) != len(COMPONENT_KINDS):
        raise DomainError(f"expected {len(COMPONENT_KINDS)} components, got {len(comps)}")
    first = comps[0]
    return TimeField(first.timegrid, first.grid, 1,
                     lambda k: -sum(c.snapshot(k) for c in comps))


def materialize_step(assembly: StepAssembly, meta: Optional[dict] = None) -> DefectState:
    """Run the step at every sample and store only the increments of active samples.

    Inactive samples keep (ρ_0, u_0, R_0) exactly.
    """
    prev = assembly.state
    K = prev.timegrid.K
    store = {}
    for k in range(K + 1):
        if assembly.active(k):
            s = assembly.at(k)
            store[k] = (s.drho, s.ddrho, s.du, s.R1)
    rho_prev, u_prev, R_prev = prev.rho, prev.u, prev.R

    def rho(k):
        base = rho_prev.snapshot(k)
        return base + store[k][0] if k in store else base

    def drho(k):
        base = time_derivative_array(rho_prev, k)
        return base + store[k][1] if k in store else base

    def u(k):
        base = u_prev.snapshot(k)
        return base + store[k][2] if k in store else base

    def R(k):
        return store[k][3] if k in store else R_prev.snapshot(k)

    tg, grid = prev.timegrid, prev.grid
    info = dict(prev.meta)
    info.update(meta or {})
    info["active_samples"] = sorted(store)
    exact = rho_prev.has_exact_derivative
    return DefectState(TimeField(tg, grid, 0, rho, drho if exact else None, cache_size=6),
                       TimeField(tg, grid, 1, u, cache_size=6),
                       TimeField(tg, grid, 1, R, cache_size=6),
                       info)


def residual_scale(state: DefectState, k: int) -> float:
    """‖ρ‖_{W^{1,2}}·(1 + ‖u‖_{C^0}) at sample k, the normalization of the residual."""
    grid = state.grid
    rho = state.rho.snapshot(k)
    u = state.u.snapshot(k)
    h1 = float(lp_array(rho, 2)) + float(lp_array(_vec_norm(grad_array(grid, rho)), 2))
    return h1 * (1.0 + float(np.max(_vec_norm(u))))


def residual_check(state: DefectState, mode: str = "auto", diffusion: bool = False,
                   samples=None) -> dict:
    """‖∂_tρ + div(ρu) [- Δρ] + div R‖_{L²} and ‖div u‖_{L²} per time sample.

    Time derivatives are exact where the state carries them (``mode='auto'``)
    and fourth-order stencils otherwise or when ``mode='stencil'``.
    """
    grid = state.grid
    K = state.timegrid.K
    ks = range(K + 1) if samples is None else samples
    # One scale for the whole run: ρ vanishes at some samples, so a per-sample
    # normalization would turn roundoff into huge relative numbers.
    scale = max(residual_scale(state, k) for k in range(K + 1))
    res, rel, divu, divu_rel = [], [], [], []
    for k in ks:
        rho = state.rho.snapshot(k)
        u = state.u.snapshot(k)
        R = state.R.snapshot(k)
        lhs = time_derivative_array(state.rho, k, mode) + div_array(grid, rho[None] * u + R)
        if diffusion:
            lhs = lhs - dk_array(grid, 2, rho)
        r = float(lp_array(lhs, 2))
        dv = float(lp_array(div_array(grid, u), 2))
        h1u = float(lp_array(_vec_norm(u), 2)) + sum(
            float(lp_array(_vec_norm(partial_array(grid, u, i)), 2)) for i in range(grid.dim))
        res.append(r)
        rel.append(r / scale if scale > 0 else r)
        divu.append(dv)
        divu_rel.append(dv / h1u if h1u > 0 else dv)
    return {"samples": list(ks), "scale": scale, "residual": np.array(res), "relative": np.array(rel),
            "div_u": np.array(divu), "div_u_relative": np.array(divu_rel)}


def check_solenoidal(state: DefectState, tol: float = DIV_TOL) -> None:
    rep = residual_check(state)
    worst = float(np.max(rep["div_u_relative"]))
    if worst > tol:
        raise SolenoidalityError(f"relative ‖div u‖ reaches {worst:.3e}")


def diffusion_augment(state: DefectState, rho_prev: TimeField, plan=None) -> DefectState:
    """R ← R + ∇(ρ - ρ_prev), turning a transport step into a transport-diffusion step."""
    if plan is None or getattr(plan, "mode", None) != "diffusion" or not getattr(plan, "feasible", False):
        raise InfeasibleError("diffusion augmentation needs a feasible diffusion-mode exponent plan")
    grid = state.grid
    R_old = state.R

    def R(k):
        return R_old.snapshot(k) + grad_array(grid, state.rho.snapshot(k) - rho_prev.snapshot(k))

    meta = dict(state.meta)
    meta["diffusion"] = True
    return DefectState(state.rho, state.u, TimeField(state.timegrid, grid, 1, R, cache_size=6), meta)


def component_report(assembly: StepAssembly, predicted: Optional[dict] = None,
                     samples=None, fitted: Optional[dict] = None) -> list:
    """JSON records {kind, t, l1_norm, predicted_scale, fitted_exponent, pass} per active sample."""
    predicted = predicted or {}
    fitted = fitted or {}
    tg = assembly.state.timegrid
    ks = [k for k in (range(tg.K + 1) if samples is None else samples) if assembly.active(k)]
    out = []
    for k in ks:
        s = assembly.at(k)
        for kind in COMPONENT_KINDS:
            l1 = float(lp_array(_vec_norm(s.components[kind]), 1))
            fe = fitted.get(kind)
            rec = {"kind": kind, "t": float(tg.times[k]), "l1_norm": l1,
                   "predicted_scale": predicted.get(kind),
                   "fitted_exponent": None if fe is None else fe.get("exponent"),
                   "pass": bool(np.isfinite(l1)) if fe is None else bool(fe.get("pass"))}
            out.append(rec)
    return out


def samplewise_norms(state: DefectState, which: str, p: float, samples=None) -> np.ndarray:
    F = getattr(state, which)
    ks = range(state.timegrid.K + 1) if samples is None else samples
    out = []
    for k in ks:
        v = F.snapshot(k)
        out.append(float(lp_array(_vec_norm(v) if F.rank else v, p)))
    return np.array(out)
