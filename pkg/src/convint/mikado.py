"""Space-time Mikado densities, fields and quadratic correctors.

Each direction j carries a concentrated bump that travels along the line
ζ_j + s e_j and is modulated by a fast transverse cosine.  Everything is
evaluated in closed form, so time derivatives and divergences come from the
chain rule instead of finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .calculus import partial_array
from .errors import InfeasibleError, ParamError, ResolutionError
from .torus_grid import (
    NODES_PER_FEATURE,
    QUADRATURE_TOL,
    GridSpec,
    ScalarField,
    VectorField,
    lp_array,

)

LINE_SAMPLES = 10_000
LINE_MARGIN = 0.05
SUPPORT_FRACTION = 0.9
# Steepness of the bump exponent.  The classical exp(-1/(1-s^2)) needs a few
# hundred nodes across its support before spectral derivatives settle below
# 1e-8; with 16 in the numerator about forty nodes suffice.
DEFAULT_SHARPNESS = 16.0
# In three dimensions the support radius is smaller and the steep profile loses
# quadrature accuracy at 64 nodes per cell (gap 3e-6); 4 keeps it near 3e-7.
SHARPNESS_BY_DIM = {2: DEFAULT_SHARPNESS, 3: 4.0}
# Nodes per bump cell 1/(λμ) for quadrature of the steep profile to ~1e-10.
BUMP_NODES = 64


def torus_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = np.abs(a - b) % 1.0
    diff = np.minimum(diff, 1.0 - diff)
    return np.sqrt((diff ** 2).sum(axis=-1))


@dataclass(frozen=True)
class MikadoLines:
    d: int
    anchors: np.ndarray = field(repr=False)
    r: float
    min_distance: float

    def point(self, j: int, s):
        """Position x_j(s) = ζ_j + s e_j (0-based direction index)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        pts = np.repeat(self.anchors[j][None, :], s.size, axis=0)
        pts[:, j] += s
        return pts % 1.0


def build_lines(d: int, samples: int = LINE_SAMPLES) -> MikadoLines:
    if d < 2:
        raise ParamError("lines need d >= 2")
    anchors = np.zeros((d, d))
    for j in range(d):
        anchors[j, j] = ((j + 1) / d) % 1.0
    s = np.arange(samples) / samples
    best = np.inf
    for i in range(d):
        xi = np.repeat(anchors[i][None, :], samples, axis=0)
        xi[:, i] += s
        for j in range(i + 1, d):
            xj = np.repeat(anchors[j][None, :], samples, axis=0)
            xj[:, j] += s
            best = min(best, float(torus_distance(xi, xj).min()))
    r = (1.0 - LINE_MARGIN) * best / 2.0
    return MikadoLines(d, anchors, r, best)


@dataclass(frozen=True)
class MikadoProfiles:
    """Radial bump φ on B(P, r0) with ∫φ² = 1 and transverse ψ(y) = √2 cos(2πy_1)."""

    d: int
    p: float
    r0: float
    sharpness: float
    norm_const: float

    @property
    def a(self) -> float:
        return self.d / self.p

    @property
    def b(self) -> float:
        return self.d - self.d / self.p

    @property
    def center(self) -> np.ndarray:
        return np.full(self.d, 0.5)

    def radial(self, rho):
        """φ as a function of the distance to the centre."""
        rho = np.asarray(rho, dtype=float)
        s = (rho / self.r0) ** 2
        inside = s < 1.0
        out = np.zeros_like(s)
        out[inside] = self.norm_const * np.exp(-self.sharpness / (1.0 - s[inside]))
        return out

    def radial_slope(self, rho):
        """|∇φ| as a function of the distance to the centre."""
        rho = np.asarray(rho, dtype=float)
        s = (rho / self.r0) ** 2
        inside = s < 1.0
        out = np.zeros_like(s)
        si = s[inside]
        out[inside] = (self.norm_const * np.exp(-self.sharpness / (1.0 - si))
                       * 2 * self.sharpness * rho[inside] / (self.r0 ** 2 * (1.0 - si) ** 2))
        return out

    def bump(self, offsets):
        """φ and the factor g with ∇φ = g·(x - P), from per-axis offsets x_i - P_i."""
        s = sum(o * o for o in offsets) / self.r0 ** 2
        s = np.broadcast_to(s, np.broadcast_shapes(*(np.shape(o) for o in offsets)))
        inside = s < 1.0
        phi = np.zeros(s.shape)
        gfac = np.zeros(s.shape)
        si = s[inside]
        vals = self.norm_const * np.exp(-self.sharpness / (1.0 - si))
        phi[inside] = vals
        gfac[inside] = -2.0 * self.sharpness * vals / (self.r0 ** 2 * (1.0 - si) ** 2)
        return phi, gfac

    def phi(self, x):
        return self.bump([xi - 0.5 for xi in x])[0]

    @staticmethod
    def psi(y):
        return math.sqrt(2.0) * np.cos(2 * np.pi * y)

    @staticmethod
    def dpsi(y):
        return -2 * np.pi * math.sqrt(2.0) * np.sin(2 * np.pi * y)


def _sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def build_profiles(lines: MikadoLines, p: float, sharpness: float | None = None,
                   support_fraction: float = SUPPORT_FRACTION) -> MikadoProfiles:
    if not 1 <= p < math.inf:
        raise ParamError(f"profile exponent p must lie in [1, inf), got {p}")
    d = lines.d
    if sharpness is None:
        sharpness = SHARPNESS_BY_DIM.get(d, DEFAULT_SHARPNESS)
    r0 = support_fraction * lines.r

    def integrand(rho):
        s = (rho / r0) ** 2
        return math.exp(-2 * sharpness / (1.0 - s)) * rho ** (d - 1) if s < 1 else 0.0

    val, _ = integrate.quad(integrand, 0.0, r0, epsabs=0.0, epsrel=1e-13, limit=200)
    c = 1.0 / math.sqrt(_sphere_area(d) * val)
    return MikadoProfiles(d, float(p), r0, float(sharpness), c)


def transverse_axis(j: int) -> int:
    """Axis carrying the fast cosine of ψ^j: the first coordinate other than j."""
    return 1 if j == 0 else 0


@dataclass(frozen=True)
class MikadoParams:
    lam: int
    mu: float
    omega: float
    nu: int

    def __post_init__(self):
        if int(self.lam) != self.lam or self.lam < 1:
            raise ParamError(f"λ must be a positive integer, got {self.lam}")
        if int(self.nu) != self.nu or self.nu < 1:
            raise ParamError(f"ν must be a positive integer, got {self.nu}")
        if self.nu % self.lam:
            raise ParamError(f"ν={self.nu} is not a multiple of λ={self.lam}")
        if self.mu < 1:
            raise ParamError(f"μ must be at least 1, got {self.mu}")
        if not self.omega > 0:
            raise ParamError(f"ω must be positive, got {self.omega}")
        object.__setattr__(self, "lam", int(self.lam))
        object.__setattr__(self, "nu", int(self.nu))

    @property
    def fastest(self) -> float:
        return max(self.lam * self.mu, self.nu)

    @property
    def required_n(self) -> float:
        """Grid size resolving the bumps (λμ scale) and the transverse cosine (ν)."""
        return max(BUMP_NODES * self.lam * self.mu, NODES_PER_FEATURE * self.nu)

    def to_json(self) -> dict:
        return {"lambda": self.lam, "mu": self.mu, "omega": self.omega, "nu": self.nu}


@dataclass(frozen=True)
class MikadoPieces:
    """Samples of the building blocks of direction j at one time.

    ``phi``/``phit`` are (φ_μ^j)_λ∘τ and (φ̃_μ^j)_λ∘τ, ``dphi``/``dphit``
    their ∂_j-profiles (∂_jφ_μ^j)_λ∘τ before the chain-rule factor λ, and
    ``psi`` is ψ^j_ν.
    """

    phi: np.ndarray
    phit: np.ndarray
    dphi: np.ndarray
    dphit: np.ndarray
    psi: np.ndarray


@dataclass(frozen=True)
class MikadoSet:
    lines: MikadoLines
    profiles: MikadoProfiles
    params: MikadoParams

    @property
    def d(self) -> int:
        return self.lines.d

    def pieces(self, j: int, t: float, coords) -> MikadoPieces:
        lam, mu, om, nu = self.params.lam, self.params.mu, self.params.omega, self.params.nu
        prof = self.profiles
        offsets = []
        for i, x in enumerate(coords):
            z = lam * x - (lam * om * t if i == j else 0.0) - self.lines.anchors[j][i]
            offsets.append(mu * (z % 1.0) - 0.5)
        base, gfac = prof.bump(offsets)
        dbase = gfac * offsets[j]
        shape = base.shape
        psi = np.broadcast_to(prof.psi(nu * coords[transverse_axis(j)]), shape)
        return MikadoPieces(
            phi=mu ** prof.a * base,
            phit=mu ** prof.b * base,
            dphi=mu ** (prof.a + 1) * dbase,
            dphit=mu ** (prof.b + 1) * dbase,
            psi=psi,
        )

    # Closed forms of the Mikado functions for direction j (scalar magnitudes;
    # W^j and its products point along e_j).
    def theta(self, j, t, coords):
        pc = self.pieces(j, t, coords)
        return pc.phi * pc.psi

    def w(self, j, t, coords):
        pc = self.pieces(j, t, coords)
        return pc.phit * pc.psi

    def q(self, j, t, coords):
        pc = self.pieces(j, t, coords)
        return pc.phi * pc.phit * pc.psi ** 2 / self.params.omega

    def dtheta_dt(self, j, t, coords):
        pc = self.pieces(j, t, coords)
        return -self.params.lam * self.params.omega * pc.dphi * pc.psi

    def div_w(self, j, t, coords):
        pc = self.pieces(j, t, coords)
        return self.params.lam * pc.dphit * pc.psi

    def dq_dt(self, j, t, coords):
        pc = self.pieces(j, t, coords)
        lam = self.params.lam
        return -lam * (pc.dphi * pc.phit + pc.phi * pc.dphit) * pc.psi ** 2

    def sample(self, which: str, j: int, t: float, grid: GridSpec, check: bool = True):
        """Grid samples of one Mikado function; W^j is returned as a vector field."""
        if check:
            require_mikado_resolution(grid, self.params)
        fn = {"theta": self.theta, "w": self.w, "q": self.q, "dtheta": self.dtheta_dt,
              "divw": self.div_w, "dq": self.dq_dt}[which]
        vals = np.broadcast_to(fn(j, t, grid.coords), grid.shape).copy()
        if which == "w":
            vec = np.zeros((grid.dim,) + grid.shape)
            vec[j] = vals
            return VectorField(grid, vec)
        return ScalarField(grid, vals)


def require_mikado_resolution(grid: GridSpec, params: MikadoParams) -> None:
    need = params.required_n
    if grid.n < need:
        raise ResolutionError(
            f"Mikado content needs n >= max({BUMP_NODES}*lambda*mu, {NODES_PER_FEATURE}*nu) "
            f"= {need:g}, grid has n={grid.n}")


def build_mikado_set(profiles: MikadoProfiles, lines: MikadoLines, params: MikadoParams) -> MikadoSet:
    if profiles.d != lines.d:
        raise ParamError("profiles and lines disagree on the dimension")
    if params.nu % params.lam:
        raise ParamError(f"ν={params.nu} is not a multiple of λ={params.lam}")
    return MikadoSet(lines, profiles, params)


@dataclass(frozen=True)
class MikadoConstants:
    eps: float
    M: float
    a: float
    b: float
    sup_phi: float
    sup_grad_phi: float


def derive_constants(p: float, p_tilde: float, d: int, profiles: MikadoProfiles) -> MikadoConstants:
    if not 1.0 / p + 1.0 / p_tilde > 1.0 + 1.0 / d:
        raise InfeasibleError(f"1/p + 1/p~ = {1 / p + 1 / p_tilde:g} must exceed 1 + 1/d = {1 + 1 / d:g}")
    eps = d / p + d / p_tilde - d - 1
    sup_phi = profiles.norm_const * math.exp(-profiles.sharpness)
    rho = np.linspace(0.0, profiles.r0, 1_000_001)
    slope = profiles.radial_slope(rho)
    k = int(np.argmax(slope))
    lo, hi = rho[max(k - 1, 0)], rho[min(k + 1, rho.size - 1)]
    res = optimize.minimize_scalar(lambda x: -float(profiles.radial_slope(np.array([x]))[0]),
                                   bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-14})
    sup_grad = max(float(slope[k]), -float(res.fun))
    sup_psi, sup_dpsi = math.sqrt(2.0), 2 * math.pi * math.sqrt(2.0)
    M = 2 * d * max(sup_phi * sup_psi, sup_grad * sup_dpsi, sup_phi ** 2 * sup_psi ** 2)
    return MikadoConstants(eps, M, d / p, d - d / p, sup_phi, sup_grad)


def conjugate(p: float) -> float:
    return math.inf if p == 1 else p / (p - 1)


@dataclass(frozen=True)
class NormReport:
    value: float
    semi_analytic: float
    agree: bool


def _norm_from_samples(grid: GridSpec, vals: np.ndarray, kind: str, r: float, lam: float = 1.0) -> float:
    base = float(lp_array(vals, r))
    if kind == "L":
        return base
    total = base
    coeffs = grid.fft(vals)
    for i, km in enumerate(grid.derivative_modes):
        total += lam * float(lp_array(grid.ifft(coeffs * (2j * np.pi * km)), r))
    return total


def _parse_norm(norm: str, p: float, p_tilde):
    if norm == "Lp":
        return "L", p
    if norm == "Lp'":
        return "L", conjugate(p)
    if norm == "L1":
        return "L", 1.0
    if norm == "C0":
        return "L", math.inf
    if norm == "W1":
        if p_tilde is None:
            raise ParamError("W1 norm needs p_tilde")
        return "W", p_tilde
    raise ParamError(f"unknown norm descriptor {norm!r}")


def mikado_norms(mset: MikadoSet, which: str, norm: str, t: float, grid: GridSpec,
                 j: int = 0, p_tilde: float | None = None) -> NormReport:
    """Norm of Θ^j, W^j or Q^j at time t, cross-checked on the reference cell.

    The second route uses that the functions are λ-periodic copies of the
    same field built with λ = 1 and ν/λ: L^r norms are unchanged and each
    derivative contributes a factor λ.
    """
    kind, r = _parse_norm(norm, mset.profiles.p, p_tilde)
    fn = {"theta": mset.theta, "w": mset.w, "q": mset.q}[which]
    lam = mset.params.lam
    try:
        require_mikado_resolution(grid, mset.params)
        direct_ok = True
    except ResolutionError:
        direct_ok = False
    ref_params = MikadoParams(1, mset.params.mu, mset.params.omega, mset.params.nu // lam)
    ref = MikadoSet(mset.lines, mset.profiles, ref_params)
    ref_fn = {"theta": ref.theta, "w": ref.w, "q": ref.q}[which]
    n_ref = max(grid.n // lam * (2 if grid.dim == 2 else 1), 16)
    n_ref = max(n_ref, 1 << math.ceil(math.log2(ref_params.required_n)))
    ref_grid = GridSpec(grid.dim, n_ref)
    ref_vals = np.broadcast_to(ref_fn(j, 0.0, ref_grid.coords), ref_grid.shape)
    semi = _norm_from_samples(ref_grid, np.asarray(ref_vals, float), kind, r, lam)
    if not direct_ok:
        return NormReport(semi, semi, True)
    vals = np.broadcast_to(fn(j, t, grid.coords), grid.shape)
    value = _norm_from_samples(grid, np.asarray(vals, float), kind, r)
    agree = abs(value - semi) <= QUADRATURE_TOL * max(abs(semi), 1e-300)
    return NormReport(value, semi, bool(agree))


def verify_cancellation(mset: MikadoSet, t: float, grid: GridSpec) -> list:
    """Relative L² residual of ∂_tQ^j + div(Θ^jW^j) for each direction."""
    require_mikado_resolution(grid, mset.params)
    out = []
    for j in range(mset.d):
        pc = mset.pieces(j, t, grid.coords)
        flux = pc.phi * pc.phit * pc.psi ** 2
        dq = -mset.params.lam * (pc.dphi * pc.phit + pc.phi * pc.dphit) * pc.psi ** 2
        resid = dq + partial_array(grid, flux, j)
        q = flux / mset.params.omega
        qc = grid.fft(q)
        w12 = float(lp_array(q, 2)) + sum(
            float(lp_array(grid.ifft(qc * (2j * np.pi * km)), 2)) for km in grid.derivative_modes)
        out.append(float(lp_array(resid, 2)) / (mset.params.omega * w12))
    return out


def verify_disjoint(mset: MikadoSet, times, grid: GridSpec) -> float:
    """Largest |Θ^i W^j| over the grid for i ≠ j at the given times."""
    worst = 0.0
    for t in times:
        th = [mset.theta(j, t, grid.coords) for j in range(mset.d)]
        ws = [mset.w(j, t, grid.coords) for j in range(mset.d)]
        for i in range(mset.d):
            for j in range(mset.d):
                if i != j:
                    worst = max(worst, float(np.max(np.abs(th[i] * ws[j]))))
    return worst


def mean_of_product(mset: MikadoSet, j: int, s: float, grid: GridSpec) -> float:
    """Grid mean of (φ_μ^j∘τ_{s e_j})(φ̃_μ^j∘τ_{s e_j}) on the unit cell."""
    unit = MikadoSet(mset.lines, mset.profiles, MikadoParams(1, mset.params.mu, 1.0, 1))
    pc = unit.pieces(j, s, grid.coords)
    return float(np.mean(pc.phi * pc.phit))


def mikado_report(mset: MikadoSet, grid: GridSpec, consts: MikadoConstants, p_tilde: float,
                  times=(0.0, 0.37), rng_seed: int = 0) -> list:
    """Verification records for the identities and bounds of the Mikado family."""
    par = mset.params.to_json()
    prof = mset.profiles
    d = mset.d
    M = consts.M
    records = []

    def add(identity, residual, bound, measured, passed):
        records.append({"identity": identity, "params": par, "residual": float(residual),
                        "bound": float(bound), "measured": float(measured), "pass": bool(passed)})

    rng = np.random.default_rng(rng_seed)
    rand_times = rng.uniform(0, 1, size=10)
    overlap = verify_disjoint(mset, rand_times, grid)
    add("disjoint_support", overlap, 0.0, overlap, overlap == 0.0)
    for t in times:
        for j, res in enumerate(verify_cancellation(mset, t, grid)):
            add(f"cancellation[j={j},t={t:g}]", res, 1e-8, res, res <= 1e-8)
    for j in range(d):
        m = mean_of_product(mset, j, 0.3, grid)
        add(f"mean_one[j={j}]", abs(m - 1), QUADRATURE_TOL, m, abs(m - 1) <= QUADRATURE_TOL)
    mu, om = mset.params.mu, mset.params.omega
    lam, nu = mset.params.lam, mset.params.nu
    bounds = [
        ("theta", "Lp", M / (2 * d)), ("w", "Lp'", M / (2 * d)), ("q", "Lp", M * mu ** prof.b / om),
        ("theta", "L1", M / mu ** prof.b), ("w", "L1", M / mu ** prof.a), ("q", "L1", M / om),
        ("w", "C0", M * mu ** prof.b),
        ("w", "W1", M * (lam * mu + nu) / mu ** (1 + consts.eps)),
    ]
    t = times[-1]
    for which, norm, bound in bounds:
        for j in range(d):
            rep = mikado_norms(mset, which, norm, t, grid, j=j, p_tilde=p_tilde)
            add(f"bound[{which},{norm},j={j}]", bound - rep.value, bound, rep.value,
                rep.value <= bound)
    return records


def as_json_records(records) -> list:
    return [dict(r) for r in records]
