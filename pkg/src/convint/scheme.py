"""Exponent planning, λ selection, the single step and the outer iteration."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from .calculus import dk_array, div_array, grad_array, partial_array
from .defect import (
    DefectState,
    StepAssembly,
    _vec_norm,
    diffusion_augment,
    materialize_step,
)
from .errors import BudgetExceeded, DomainError, InfeasibleError, MeanError, ParamError, SolenoidalityError
from .mikado import (
    BUMP_NODES,
    MikadoParams,
    build_lines,
    build_mikado_set,
    build_profiles,
    conjugate,
    derive_constants,
)
from .perturbation import (
    build_coefficients,
    build_cutoffs,
    build_perturbations,
    smooth_step,
    smooth_step_curvature,
    smooth_step_slope,
)
from .torus_grid import (
    MEAN_TOL,
    NODES_PER_FEATURE,
    GridSpec,
    TimeField,
    TimeGrid,
    lp_array,
    time_derivative_array,
)

ALPHA_DENOMINATOR = 8
ALPHA_STEPS = 400
EMPIRICAL_ORDER = 3


# ---------------------------------------------------------------- planning

@dataclass(frozen=True)
class ExponentPlan:
    p: float
    p_tilde: float
    d: int
    mode: str
    eps: float
    a: float
    b: float
    alpha: Fraction
    beta: Fraction
    gamma: int
    N: int
    flags: tuple

    @property
    def feasible(self) -> bool:
        return all(self.flags)

    def params(self, lam: int) -> MikadoParams:
        """μ = λ^α (at least 1), ω = λ^β, ν = λ^γ."""
        return MikadoParams(lam, max(1.0, float(lam) ** float(self.alpha)),
                            float(lam) ** float(self.beta), int(lam) ** self.gamma)

    def to_json(self) -> dict:
        return {"p": self.p, "p_tilde": self.p_tilde, "d": self.d, "mode": self.mode,
                "eps": self.eps, "a": self.a, "b": self.b, "alpha": float(self.alpha),
                "beta": float(self.beta), "gamma": self.gamma, "N": self.N,
                "flags": list(self.flags), "feasible": self.feasible}


def plan_conditions(eps, b, alpha, beta, gamma, N) -> tuple:
    """The six parameter inequalities, in order."""
    return (1 < alpha * eps,
            alpha + 1 < gamma,
            gamma < alpha * (1 + eps),
            b * alpha < beta,
            beta + 1 + alpha < b * alpha + gamma,
            N * (1 + alpha) < (N - 1) * gamma)


def transport_eps(p: float, p_tilde: float, d: int) -> float:
    return d / p + d / p_tilde - d - 1


def diffusion_eps(p: float, p_tilde: float, d: int) -> float:
    """Half the largest admissible ε of the viscous variant."""
    pp = conjugate(p)
    return 0.5 * min(d / p_tilde - d / pp - 1, d / pp - 1)


def plan_exponents(p: float, p_tilde: float, d: int, mode: str = "transport") -> ExponentPlan:
    if mode not in ("transport", "diffusion"):
        raise DomainError(f"unknown plan mode {mode!r}")
    if d < 2:
        raise InfeasibleError("dimension must be at least 2")
    if p < 1 or p_tilde < 1:
        raise InfeasibleError("exponents must be at least 1")
    if not 1 / p + 1 / p_tilde > 1 + 1 / d:
        raise InfeasibleError(f"1/p + 1/p~ = {1 / p + 1 / p_tilde:g} does not exceed 1 + 1/d = {1 + 1 / d:g}")
    a, b = d / p, d - d / p
    if mode == "diffusion":
        pp = conjugate(p)
        if not pp < d:
            raise InfeasibleError(f"diffusion mode needs p' < d, got p' = {pp:g}")
        eps = diffusion_eps(p, p_tilde, d)
        if not eps > 0:
            raise InfeasibleError("no admissible ε for the viscous variant")
    else:
        eps = transport_eps(p, p_tilde, d)
    eps_q = Fraction(eps).limit_denominator(10 ** 6)
    alpha = Fraction(math.ceil(2 / eps_q) + 1)
    step = Fraction(1, ALPHA_DENOMINATOR)
    for _ in range(ALPHA_STEPS):
        gamma = math.floor(alpha + 1) + 1
        if gamma < alpha * (1 + eps_q) and alpha * eps_q > 1:
            break
        alpha += step
    else:
        raise InfeasibleError(f"no integer γ in (α+1, α(1+ε)) for α up to {float(alpha):g}")
    b_q = Fraction(b).limit_denominator(10 ** 9)
    beta = b_q * alpha + Fraction(gamma - alpha - 1, 2)
    N = 2
    while not N * (1 + alpha) < (N - 1) * gamma:
        N += 1
    flags = plan_conditions(eps, b, float(alpha), float(beta), gamma, N)
    return ExponentPlan(p, p_tilde, d, mode, eps, a, b, alpha, beta, gamma, N, flags)


# ---------------------------------------------------------------- seeds

def time_cutoff(T: float):
    """χ(t): 0 on [0, T/3], 1 on [2T/3, T], smooth in between; returns (χ, χ', χ'')."""
    third = T / 3.0

    def chi(t):
        return float(smooth_step((t - third) / third))

    def dchi(t):
        return float(smooth_step_slope((t - third) / third)) / third

    def ddchi(t):
        return float(smooth_step_curvature((t - third) / third)) / third ** 2

    return chi, dchi, ddchi


def _grid_vector(fn, t, grid):
    raw = fn(t, grid.coords)
    return np.stack([np.broadcast_to(np.asarray(c, float), grid.shape) for c in raw])


def _grid_scalar(fn, t, grid):
    return np.broadcast_to(np.asarray(fn(t, grid.coords), float), grid.shape).copy()


def _check_seed(grid, rho, u):
    scale = max(float(np.sqrt(np.mean(rho ** 2))), 1.0)
    if abs(float(rho.mean())) > MEAN_TOL * scale:
        raise MeanError(f"seed density has mean {float(rho.mean()):.3e}")
    if u is not None:
        dv = float(lp_array(div_array(grid, u), 2))
        uscale = max(float(lp_array(_vec_norm(u), 2)), 1e-300)
        if dv > 1e-9 * max(uscale, 1.0):
            raise SolenoidalityError(f"seed velocity has ‖div u‖ = {dv:.3e}")


def seed_scenario(rho_bar: Callable, u_bar: Optional[Callable], grid: GridSpec, timegrid: TimeGrid,
                  shape: str = "theorem13", drho_bar: Optional[Callable] = None,
                  equation: str = "transport") -> DefectState:
    """Starting state (ρ_0, u_0, R_0).

    ``rho_bar(t, x)`` and ``u_bar(t, x)`` are closed forms.  ``raw`` keeps them
    and sets R_0 = -∇Δ^{-1}[∂_tρ̄ + div(ρ̄ū)]; ``theorem13`` uses the profile
    ρ̄(T, ·) switched on by χ(t) with u ≡ 0, so R_0 vanishes near both ends.
    With ``equation='diffusion'`` the defect also absorbs ∇ρ_0.
    """
    if shape not in ("raw", "theorem13"):
        raise DomainError(f"unknown seed shape {shape!r}")
    if equation not in ("transport", "diffusion"):
        raise DomainError(f"unknown equation {equation!r}")
    T, tg, d = timegrid.T, timegrid, grid.dim
    zero_u = np.zeros((d,) + grid.shape)
    viscous = equation == "diffusion"

    if shape == "theorem13":
        profile = _grid_scalar(rho_bar, T, grid)
        _check_seed(grid, profile, None)
        chi, dchi, ddchi = time_cutoff(T)
        G = dk_array(grid, -1, profile)          # ∇Δ^{-1}ρ̄
        gprof = grad_array(grid, profile)
        times = tg.times

        def rho(k):
            return chi(times[k]) * profile

        def drho(k):
            return dchi(times[k]) * profile

        def R(k):
            out = -dchi(times[k]) * G
            return out + chi(times[k]) * gprof if viscous else out

        def dR(k):
            out = -ddchi(times[k]) * G
            return out + dchi(times[k]) * gprof if viscous else out

        meta = {"seed": "theorem13", "equation": equation}
        return DefectState(TimeField(tg, grid, 0, rho, drho),
                           TimeField(tg, grid, 1, lambda k: zero_u),
                           TimeField(tg, grid, 1, R, dR), meta)

    times = tg.times

    def rho(k):
        return _grid_scalar(rho_bar, times[k], grid)

    def u(k):
        return zero_u if u_bar is None else _grid_vector(u_bar, times[k], grid)

    _check_seed(grid, rho(0), None if u_bar is None else u(0))
    rho_f = TimeField(tg, grid, 0, rho,
                      None if drho_bar is None else (lambda k: _grid_scalar(drho_bar, times[k], grid)))
    u_f = TimeField(tg, grid, 1, u)

    def R(k):
        src = time_derivative_array(rho_f, k) + div_array(grid, rho(k)[None] * u(k))
        out = -dk_array(grid, -1, src)
        return out + grad_array(grid, rho(k)) if viscous else out

    return DefectState(rho_f, u_f, TimeField(tg, grid, 1, R),
                       {"seed": "raw", "equation": equation})


def cosine_profile(t, x):
    """ρ̄ = cos(2πx₁), broadcast over the remaining axes."""
    return np.cos(2 * np.pi * x[0]) + 0 * sum(x[1:])


def theorem13_seed(grid: GridSpec, timegrid: TimeGrid, equation: str = "transport") -> DefectState:
    """The cosine profile switched on in time, with zero velocity."""
    return seed_scenario(cosine_profile, None, grid, timegrid, "theorem13", equation=equation)


def manufactured_seed(grid: GridSpec, timegrid: TimeGrid, amplitude: float = 0.2,
                      drift: float = 0.3, offset: float = 1.0, equation: str = "transport") -> DefectState:
    """Smooth seed whose defect components stay away from zero.

    ρ = A sin(2πt/T) cos(2π(x_1+x_2)), u = c (sin 2πx_2, sin 2πx_1, 0, ...) and
    R = -∇Δ^{-1}[∂_tρ + div(ρu)] + g(t) S(x) with S divergence-free and
    every component of size about ``offset``.  With δ/(2d) below min |R^j|
    all cutoffs are identically one, so the step has no switching in t.
    """
    if equation not in ("transport", "diffusion"):
        raise DomainError(f"unknown equation {equation!r}")
    d, T, times = grid.dim, timegrid.T, timegrid.times
    x = grid.coords
    two_pi = 2 * np.pi
    P = np.broadcast_to(np.cos(two_pi * sum(x)), grid.shape).copy()
    U = np.zeros((d,) + grid.shape)
    U[0] = drift * np.sin(two_pi * x[1])
    U[1] = drift * np.sin(two_pi * x[0])
    S = np.stack([np.broadcast_to(offset * (1.0 + 0.3 * np.sin(two_pi * x[(j + 1) % d])), grid.shape)
                  for j in range(d)])
    GP = dk_array(grid, -1, P)
    GPU = dk_array(grid, -1, div_array(grid, P[None] * U))
    gradP = grad_array(grid, P)
    w = two_pi / T

    def s(t):
        return math.sin(w * t), w * math.cos(w * t), -w * w * math.sin(w * t)

    def g(t):
        return 1.0 + 0.25 * math.sin(w * t), 0.25 * w * math.cos(w * t)

    viscous = equation == "diffusion"

    def rho(k):
        return amplitude * s(times[k])[0] * P

    def drho(k):
        return amplitude * s(times[k])[1] * P

    def R(k):
        s0, s1, _ = s(times[k])
        out = -amplitude * (s1 * GP + s0 * GPU) + g(times[k])[0] * S
        return out + amplitude * s0 * gradP if viscous else out

    def dR(k):
        _, s1, s2 = s(times[k])
        out = -amplitude * (s2 * GP + s1 * GPU) + g(times[k])[1] * S
        return out + amplitude * s1 * gradP if viscous else out

    _check_seed(grid, P, U)
    return DefectState(TimeField(timegrid, grid, 0, rho, drho),
                       TimeField(timegrid, grid, 1, lambda k: U),
                       TimeField(timegrid, grid, 1, R, dR),
                       {"seed": "manufactured", "equation": equation})


# ---------------------------------------------------------------- one step

@dataclass
class StepReport:
    lam: int
    params: dict
    mode: str
    rho_Lp: list
    u_Lpp: list
    u_W1: list
    R1_L1: list
    targets: dict
    passed: dict
    active_samples: list
    wall_time: float = 0.0
    # largest relative size of the aliasing remainder removed from w_c
    alias_fraction: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def all_pass(self) -> bool:
        return all(self.passed.values())


def _w1_norm(grid, vec, r):
    total = float(lp_array(_vec_norm(vec), r))
    for i in range(grid.dim):
        total += float(lp_array(_vec_norm(partial_array(grid, vec, i)), r))
    return total


def build_step(state: DefectState, delta: float, eta: float, p: float, params: MikadoParams,
               N: int, sharpness: Optional[float] = None, time_mode: str = "auto",
               check_resolution: bool = True) -> StepAssembly:
    grid = state.grid
    lines = build_lines(grid.dim)
    profiles = build_profiles(lines, p, sharpness)
    mset = build_mikado_set(profiles, lines, params)
    cut = build_cutoffs(state.R, delta)
    coeffs = build_coefficients(state.R, cut, eta, p, time_mode)
    bundle = build_perturbations(coeffs, mset, N, check_resolution)
    return StepAssembly(state, bundle, coeffs, mset, N)


def measure_step(assembly: StepAssembly, samples, p: float, p_tilde: float):
    """Per-sample norms (‖Δρ‖_p, ‖Δu‖_p', ‖Δu‖_{W^{1,p̃}}, ‖R_1‖_1, ‖R_0‖_1)."""
    grid = assembly.grid
    pp = conjugate(p)
    out = []
    for k in samples:
        s = assembly.at(k)
        R0 = assembly.state.R.snapshot(k)
        out.append((float(lp_array(s.drho, p)), float(lp_array(_vec_norm(s.du), pp)),
                    _w1_norm(grid, s.du, p_tilde), float(lp_array(_vec_norm(s.R1), 1)),
                    float(lp_array(_vec_norm(R0), 1))))
    return np.array(out).reshape(-1, 5)


def _report(assembly, samples, delta, eta, p, p_tilde, M, mode, t0, required=None):
    m = measure_step(assembly, samples, p, p_tilde)
    pp = conjugate(p)
    rho_t = M * eta * m[:, 4] ** (1 / p)
    u_t = (M / eta) * m[:, 4] ** (1 / pp)
    passed = {"rho_Lp": bool(np.all(m[:, 0] <= rho_t)), "u_Lpp": bool(np.all(m[:, 1] <= u_t)),
              "u_W1": bool(np.all(m[:, 2] <= delta)), "R1_L1": bool(np.all(m[:, 3] <= delta))}
    targets = {"rho_Lp": rho_t.tolist(), "u_Lpp": u_t.tolist(), "u_W1": delta, "R1_L1": delta}
    par = assembly.mikados.params
    active = [int(k) for k in samples if assembly.active(k)]
    alias = max(assembly.bundle.alias_by_sample.values(), default=0.0)
    return StepReport(par.lam, par.to_json(), mode, m[:, 0].tolist(), m[:, 1].tolist(),
                      m[:, 2].tolist(), m[:, 3].tolist(), targets, passed,
                      active, time.perf_counter() - t0, float(alias))


def proposition_step(state: DefectState, delta: float, eta: float, plan: ExponentPlan, lam: int,
                     params: Optional[MikadoParams] = None, N: Optional[int] = None,
                     mode: str = "strict", sharpness: Optional[float] = None,
                     time_mode: str = "auto", M: Optional[float] = None):
    """One step: returns the new state and the report of the four step estimates."""
    t0 = time.perf_counter()
    if params is None:
        params = plan.params(lam)
    N = plan.N if N is None else N
    asm = build_step(state, delta, eta, plan.p, params, N, sharpness, time_mode)
    if M is None:
        M = derive_constants(plan.p, plan.p_tilde, plan.d, asm.mikados.profiles).M
    new = materialize_step(asm, {"delta": delta, "eta": eta, "params": params.to_json(), "N": N,
                                 "p": plan.p, "p_tilde": plan.p_tilde})
    if state.meta.get("equation") == "diffusion":
        new = diffusion_augment(new, state.rho, plan)
        new.meta["equation"] = "diffusion"
    report = _report(asm, range(state.timegrid.K + 1), delta, eta, plan.p, plan.p_tilde, M, mode, t0)
    if state.meta.get("equation") == "diffusion":
        # R_1 changed after augmentation; re-measure it from the new state.
        report.R1_L1 = [float(lp_array(_vec_norm(new.R.snapshot(k)), 1))
                        for k in range(state.timegrid.K + 1)]
        report.passed["R1_L1"] = bool(max(report.R1_L1) <= delta)
    return new, report


# ---------------------------------------------------------------- λ selection

RESOLUTION_RULE = f"n >= max({BUMP_NODES}*lambda*mu, {NODES_PER_FEATURE}*nu)"


def required_resolution(params: MikadoParams) -> int:
    """Smallest power-of-two grid satisfying the Mikado resolution rule."""
    return 1 << max(2, math.ceil(math.log2(params.required_n)))


def _state_is_zero(state: DefectState) -> bool:
    return all(not np.any(state.R.snapshot(k)) for k in range(state.timegrid.K + 1))


@dataclass(frozen=True)
class SearchSpace:
    """Empirical-mode candidates: μ, ν/λ, ω and λ on finite lists."""

    lams: tuple = (2, 4, 8, 16)
    mus: tuple = (2.0, 4.0, 8.0)
    nu_factors: tuple = (1, 2, 4)
    omegas: tuple = (0.25, 1.0, 4.0)
    screen_samples: int = 3


def _candidates(space: SearchSpace, n: int):
    out = []
    for lam in space.lams:
        for mu in space.mus:
            for f in space.nu_factors:
                for om in space.omegas:
                    try:
                        par = MikadoParams(lam, mu, om, lam * f)
                    except ParamError:
                        continue
                    if par.required_n <= n:
                        out.append(par)
    out.sort(key=lambda q: (q.lam, q.fastest, q.mu, q.nu, q.omega))
    return out


def _screen_samples(state: DefectState, count: int):
    l1 = np.array([float(lp_array(_vec_norm(state.R.snapshot(k)), 1))
                   for k in range(state.timegrid.K + 1)])
    order = np.argsort(-l1)
    return sorted(int(k) for k in order[:count])


def choose_lambda(plan: ExponentPlan, state: DefectState, delta: float, eta: float,
                  mode: str = "strict", budget: Optional[int] = None,
                  space: Optional[SearchSpace] = None, N: Optional[int] = None,
                  M: Optional[float] = None, required=("rho_Lp", "u_Lpp", "u_W1", "R1_L1"),
                  log: Optional[list] = None):
    """Smallest admissible λ (strict) or first admissible parameter tuple (empirical).

    Returns (λ, MikadoParams).  Strict mode ties μ, ω, ν to powers of λ and
    fails as soon as the resolution rule asks for more than the budget.  Empirical mode walks ``space`` and screens each tuple on the
    samples where the defect is largest.
    """
    if mode not in ("strict", "empirical"):
        raise DomainError(f"unknown λ-selection mode {mode!r}")
    budget = state.grid.n if budget is None else budget
    if _state_is_zero(state):
        return 2, plan.params(2)
    if mode == "strict":
        lam = 2
        while True:
            par = plan.params(lam)
            need = par.required_n
            if need > budget or need > state.grid.n:
                raise BudgetExceeded(
                    f"resolution rule {RESOLUTION_RULE} needs n >= {need:.0f} at lambda={lam} "
                    f"(mu={par.mu:g}, nu={par.nu}); budget is {budget}",
                    required_n=required_resolution(par), blocking=RESOLUTION_RULE)
            asm = build_step(state, delta, eta, plan.p, par, plan.N if N is None else N)
            samples = _screen_samples(state, (space or SearchSpace()).screen_samples)
            rep = _report(asm, samples, delta, eta, plan.p, plan.p_tilde,
                          M if M is not None else derive_constants(plan.p, plan.p_tilde, plan.d,
                                                                   asm.mikados.profiles).M,
                          mode, time.perf_counter())
            if all(rep.passed[r] for r in required):
                return lam, par
            lam += 1
    space = space or SearchSpace()
    N = EMPIRICAL_ORDER if N is None else N
    n = min(budget, state.grid.n)
    cands = _candidates(space, n)
    if not cands:
        raise BudgetExceeded(f"no candidate tuple fits n={n}", required_n=None,
                             blocking=RESOLUTION_RULE)
    samples = _screen_samples(state, space.screen_samples)
    best, best_key = None, None
    for par in cands:
        asm = build_step(state, delta, eta, plan.p, par, N)
        if M is None:
            M = derive_constants(plan.p, plan.p_tilde, plan.d, asm.mikados.profiles).M
        rep = _report(asm, samples, delta, eta, plan.p, plan.p_tilde, M, mode, time.perf_counter())
        if log is not None:
            log.append({"params": par.to_json(), "R1_L1": max(rep.R1_L1), "u_W1": max(rep.u_W1),
                        "passed": rep.passed})
        if all(rep.passed[r] for r in required):
            return par.lam, par
        key = max(rep.R1_L1)
        if best_key is None or key < best_key:
            best, best_key = (par, rep), key
    par, rep = best
    failing = [r for r in required if not rep.passed[r]]
    raise BudgetExceeded(
        f"no tuple within n={n} meets {', '.join(failing)}; best R1 L1 = {best_key:.3e} "
        f"at {par.to_json()} against delta = {delta:.3e}",
        required_n=2 * n, blocking=", ".join(failing), partial=rep)


# ---------------------------------------------------------------- iteration

@dataclass
class IterationConfig:
    p: float
    p_tilde: float
    delta0: Optional[float] = None
    sigma: float = 1.0
    decay: float = 4.0
    max_steps: int = 3
    mode: str = "empirical"
    budget_n: int = 1024
    eps_target: Optional[float] = None
    search: SearchSpace = field(default_factory=SearchSpace)
    N: Optional[int] = None
    required: tuple = ("rho_Lp", "u_Lpp", "u_W1", "R1_L1")
    diffusion: bool = False

    def delta(self, n: int) -> float:
        return self.delta0 * self.decay ** (-n)

    def eta(self, n: int) -> float:
        """η_n with δ_n^{1/p} η_n = σ δ_n^{1/2}."""
        return self.sigma * self.delta(n) ** (0.5 - 1.0 / self.p)

    def schedule_sum(self, steps: Optional[int] = None) -> float:
        """Σ δ_n^{1/2}, over ``steps`` terms or the full geometric series."""
        r = self.decay ** -0.5
        if steps is None:
            return self.delta0 ** 0.5 / (1 - r)
        return sum(self.delta(n) ** 0.5 for n in range(steps))


@dataclass
class IterationResult:
    states: list
    reports: list
    manifest: dict
    stopped: Optional[str] = None


def c_t_norm(state: DefectState, which: str, p: float, base: Optional[DefectState] = None) -> float:
    """sup_t ‖F(t) - F_base(t)‖_{L^p} over the time samples."""
    F = getattr(state, which)
    G = None if base is None else getattr(base, which)
    best = 0.0
    for k in range(state.timegrid.K + 1):
        v = F.snapshot(k)
        if G is not None:
            v = v - G.snapshot(k)
        best = max(best, float(lp_array(_vec_norm(v) if F.rank else v, p)))
    return best


def iterate(seed: DefectState, config: IterationConfig, plan: Optional[ExponentPlan] = None,
            progress: Optional[Callable] = None) -> IterationResult:
    if plan is None:
        plan = plan_exponents(config.p, config.p_tilde, seed.grid.dim,
                              "diffusion" if config.diffusion else "transport")
    if config.delta0 is None:
        config.delta0 = max(c_t_norm(seed, "R", 1), 1e-300)
    lines = build_lines(seed.grid.dim)
    M = derive_constants(plan.p, plan.p_tilde, plan.d, build_profiles(lines, plan.p)).M
    pp = conjugate(config.p)
    states, reports = [seed], []
    steps_json = []
    manifest = {"p": config.p, "p_tilde": config.p_tilde, "d": seed.grid.dim, "n": seed.grid.n,
                "K": seed.timegrid.K, "T": seed.timegrid.T, "mode": config.mode,
                "plan": plan.to_json(), "M": M,
                "schedules": {"delta0": config.delta0, "decay": config.decay, "sigma": config.sigma,
                              "delta": [config.delta(n) for n in range(config.max_steps + 1)],
                              "eta": [config.eta(n) for n in range(config.max_steps)]},
                "R_CtL1": [c_t_norm(seed, "R", 1)], "steps": steps_json}
    stopped = None
    for n in range(config.max_steps):
        cur = states[-1]
        delta_next, eta = config.delta(n + 1), config.eta(n)
        t0 = time.perf_counter()
        search_log = []
        try:
            lam, par = choose_lambda(plan, cur, delta_next, eta, config.mode, config.budget_n,
                                     config.search, config.N, M, config.required, search_log)
        except BudgetExceeded as exc:
            stopped = str(exc)
            steps_json.append({"step": n, "error": "BudgetExceeded", "message": str(exc),
                               "blocking": exc.blocking, "required_n": exc.required_n,
                               "search": search_log})
            manifest["stopped"] = stopped
            exc.partial = IterationResult(states, reports, manifest, stopped)
            raise
        N = config.N if config.N is not None else (EMPIRICAL_ORDER if config.mode == "empirical" else plan.N)
        new, rep = proposition_step(cur, delta_next, eta, plan, lam, par, N, config.mode, M=M)
        states.append(new)
        reports.append(rep)
        d_rho = c_t_norm(new, "rho", config.p, cur)
        d_u = c_t_norm(new, "u", pp, cur)
        R_norm = c_t_norm(new, "R", 1)
        manifest["R_CtL1"].append(R_norm)
        bound = config.delta(n) ** 0.5
        steps_json.append({"step": n, "lambda": lam, "params": par.to_json(), "N": N,
                           "delta": delta_next, "eta": eta, "report": rep.to_json(),
                           "rho_increment_CtLp": d_rho, "rho_increment_bound": M * config.sigma * bound,
                           "u_increment_CtLpp": d_u, "u_increment_bound": M / config.sigma * bound,
                           "R_CtL1": R_norm, "search": search_log,
                           "wall_time": time.perf_counter() - t0})
        if progress is not None:
            progress(steps_json[-1])
    return IterationResult(states, reports, manifest, stopped)
