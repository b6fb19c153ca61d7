"""Cutoffs, coefficient fields and the Mikado perturbations of one step.

All quantities are produced per time sample and cached briefly; only samples
where some component of the old defect exceeds the lower cutoff threshold
carry nonzero perturbations.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .calculus import antidiv_bilinear_array, dk_array, div_array, partial_array
from .errors import DomainError, MeanError
from .mikado import MikadoPieces, MikadoSet, conjugate, require_mikado_resolution
from .torus_grid import (
    MEAN_TOL,
    GridSpec,
    TimeField,
    lp_array,
    time_derivative_array,
)


def smooth_step(x):
    """C^∞ step: 0 for x <= 0, 1 for x >= 1, f(x)/(f(x)+f(1-x)) with f = exp(-1/x) between."""
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 1.0, 1.0, 0.0)
    mid = (x > 0.0) & (x < 1.0)
    xm = x[mid]
    # subnormal xm sends 1/xm to inf, and expit(-inf) = 0 is the right limit
    with np.errstate(over="ignore"):
        out[mid] = expit(1.0 / (1.0 - xm) - 1.0 / xm)
    return out


def smooth_step_slope(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    mid = (x > 0.0) & (x < 1.0)
    xm = x[mid]
    b = expit(1.0 / (1.0 - xm) - 1.0 / xm)
    out[mid] = b * (1.0 - b) * (1.0 / xm ** 2 + 1.0 / (1.0 - xm) ** 2)
    return out


def smooth_step_curvature(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    mid = (x > 0.0) & (x < 1.0)
    xm = x[mid]
    b = expit(1.0 / (1.0 - xm) - 1.0 / xm)
    g = 1.0 / xm ** 2 + 1.0 / (1.0 - xm) ** 2
    dg = -2.0 / xm ** 3 + 2.0 / (1.0 - xm) ** 3
    slope = b * (1.0 - b) * g
    out[mid] = slope * (1.0 - 2.0 * b) * g + b * (1.0 - b) * dg
    return out


class _LRU:
    def __init__(self, size: int):
        self.size = size
        self.data = OrderedDict()

    def get(self, key, make):
        if key in self.data:
            self.data.move_to_end(key)
            return self.data[key]
        val = make()
        self.data[key] = val
        if len(self.data) > self.size:
            self.data.popitem(last=False)
        return val


class CutoffFamily:
    """χ_j = H(|R_0^j|) with plateaus at δ/(4d) and δ/(2d)."""

    def __init__(self, R0: TimeField, delta: float):
        if not delta > 0:
            raise DomainError("δ must be positive")
        if R0.rank != 1:
            raise DomainError("cutoffs need a vector defect field")
        self.R0 = R0
        self.delta = float(delta)
        self.d = R0.grid.dim
        self._cache = _LRU(3)

    @property
    def lower(self) -> float:
        return self.delta / (4 * self.d)

    @property
    def upper(self) -> float:
        return self.delta / (2 * self.d)

    def H(self, v):
        return smooth_step((np.abs(v) - self.lower) / self.lower)

    def H_slope(self, v):
        return smooth_step_slope((np.abs(v) - self.lower) / self.lower) / self.lower

    def active(self, k: int) -> bool:
        return bool(np.max(np.abs(self.R0.snapshot(k))) > self.lower)

    def chi(self, k: int) -> np.ndarray:
        return self._cache.get(k, lambda: self.H(self.R0.snapshot(k)))

    def field(self) -> TimeField:
        return TimeField(self.R0.timegrid, self.R0.grid, 1, self.chi)


def build_cutoffs(R0: TimeField, delta: float) -> CutoffFamily:
    return CutoffFamily(R0, delta)


@dataclass(frozen=True)
class CoefficientSample:
    """a_j, b_j, a_j b_j and their time derivatives, stacked over j."""

    a: np.ndarray
    b: np.ndarray
    ab: np.ndarray
    da: np.ndarray
    db: np.ndarray
    dab: np.ndarray
    chi: np.ndarray


class CoefficientFields:
    def __init__(self, R0: TimeField, cutoffs: CutoffFamily, eta: float, p: float,
                 time_mode: str = "auto"):
        if not eta > 0:
            raise DomainError("η must be positive")
        if not 1 < p < np.inf:
            raise DomainError(f"coefficients need 1 < p < inf, got {p}")
        self.R0 = R0
        self.cutoffs = cutoffs
        self.eta = float(eta)
        self.p = float(p)
        self.time_mode = time_mode
        self._cache = _LRU(3)

    def active(self, k: int) -> bool:
        return self.cutoffs.active(k)

    def at(self, k: int) -> CoefficientSample:
        return self._cache.get(k, lambda: self._compute(k))

    def _compute(self, k: int) -> CoefficientSample:
        R = self.R0.snapshot(k)
        chi = self.cutoffs.chi(k)
        zeros = np.zeros_like(R)
        if not self.active(k):
            return CoefficientSample(zeros, zeros, zeros, zeros, zeros, zeros, chi)
        dR = time_derivative_array(self.R0, k, self.time_mode)
        eta, ip = self.eta, 1.0 / self.p
        iq = 1.0 - ip
        absR = np.abs(R)
        sgn = np.sign(R)
        a = eta * chi * sgn * absR ** ip
        b = chi * absR ** iq / eta
        ab = chi ** 2 * R
        dchi = self.cutoffs.H_slope(R) * sgn * dR
        live = chi > 0
        safe = np.where(live, absR, 1.0)
        da = eta * (dchi * sgn * absR ** ip + np.where(live, chi * ip * safe ** (ip - 1.0), 0.0) * dR)
        db = (dchi * absR ** iq + np.where(live, chi * iq * safe ** (iq - 1.0), 0.0) * sgn * dR) / eta
        dab = 2 * chi * dchi * R + chi ** 2 * dR
        return CoefficientSample(a, b, ab, da, db, dab, chi)


def build_coefficients(R0: TimeField, cutoffs: CutoffFamily, eta: float, p: float,
                       time_mode: str = "auto") -> CoefficientFields:
    return CoefficientFields(R0, cutoffs, eta, p, time_mode)


@dataclass(frozen=True)
class PerturbationSample:
    active: bool
    theta: np.ndarray
    theta_c: float
    q: np.ndarray
    q_c: float
    w: np.ndarray
    wc: np.ndarray
    dtheta: np.ndarray
    dtheta_c: float
    dq: np.ndarray
    dq_c: float
    f: np.ndarray
    pieces: tuple
    alias_fraction: float = 0.0

    @property
    def rho_increment(self) -> np.ndarray:
        return self.theta + self.theta_c + self.q + self.q_c

    @property
    def drho_increment(self) -> np.ndarray:
        return self.dtheta + self.dtheta_c + self.dq + self.dq_c

    @property
    def u_increment(self) -> np.ndarray:
        return self.w + self.wc


class PerturbationBundle:
    """ϑ, q, w, the mean correctors ϑ_c, q_c and the divergence corrector w_c.

    w_c = -Σ_j R_N(f_j, ψ^j_ν) with f_j = ∂_j(b_j (φ̃_μ^j)_λ∘τ), the e_j
    component of ∇(b_j φ̃), which is what div w produces.
    """

    def __init__(self, coeffs: CoefficientFields, mikados: MikadoSet, N: int,
                 check_resolution: bool = True):
        self.coeffs = coeffs
        self.mikados = mikados
        self.N = int(N)
        self.grid: GridSpec = coeffs.R0.grid
        self.timegrid = coeffs.R0.timegrid
        if check_resolution:
            require_mikado_resolution(self.grid, mikados.params)
        self._cache = _LRU(3)
        self.alias_by_sample: dict = {}

    def active(self, k: int) -> bool:
        return self.coeffs.active(k)

    def at(self, k: int) -> PerturbationSample:
        return self._cache.get(k, lambda: self._compute(k))

    def _compute(self, k: int) -> PerturbationSample:
        grid, d = self.grid, self.grid.dim
        scalar0 = np.zeros(grid.shape)
        vector0 = np.zeros((d,) + grid.shape)
        if not self.active(k):
            return PerturbationSample(False, scalar0, 0.0, scalar0, 0.0, vector0, vector0,
                                      scalar0, 0.0, scalar0, 0.0, vector0, ())
        t = self.timegrid.times[k]
        co = self.coeffs.at(k)
        par = self.mikados.params
        lam, om = par.lam, par.omega
        theta = np.zeros(grid.shape)
        dtheta = np.zeros(grid.shape)
        q = np.zeros(grid.shape)
        dq = np.zeros(grid.shape)
        w = np.zeros((d,) + grid.shape)
        wc = np.zeros((d,) + grid.shape)
        f = np.zeros((d,) + grid.shape)
        pieces = []
        for j in range(d):
            pc: MikadoPieces = self.mikados.pieces(j, t, grid.coords)
            pieces.append(pc)
            psi_mean = float(np.mean(pc.psi))
            if abs(psi_mean) > MEAN_TOL:
                raise MeanError(f"transverse profile has mean {psi_mean:.3e}")
            th = pc.phi * pc.psi
            theta += co.a[j] * th
            dtheta += co.da[j] * th - lam * om * co.a[j] * pc.dphi * pc.psi
            prod = pc.phi * pc.phit
            psi2 = pc.psi ** 2
            q += co.ab[j] * prod * psi2 / om
            dq += (co.dab[j] * prod / om
                   - lam * co.ab[j] * (pc.dphi * pc.phit + pc.phi * pc.dphit)) * psi2
            w[j] = co.b[j] * pc.phit * pc.psi
            f[j] = partial_array(grid, co.b[j] * pc.phit, j)
            wc -= antidiv_bilinear_array(grid, f[j], pc.psi, self.N)
        # On the grid ∂_j(bφ̃ψ) and ∂_j(bφ̃)·ψ differ by the aliasing of the
        # product; remove that remainder so div(w + w_c) vanishes for the
        # discrete divergence, and keep its relative size for the reports.
        fix = -dk_array(grid, -1, div_array(grid, w + wc))
        scale = float(np.sqrt(np.mean((wc ** 2).sum(axis=0))))
        alias = float(np.sqrt(np.mean((fix ** 2).sum(axis=0)))) / scale if scale > 0 else 0.0
        wc += fix
        self.alias_by_sample[k] = alias
        return PerturbationSample(True, theta, -float(theta.mean()), q, -float(q.mean()), w, wc,
                                  dtheta, -float(dtheta.mean()), dq, -float(dq.mean()), f,
                                  tuple(pieces), alias)

    def field(self, name: str) -> TimeField:
        """Lazy time field view of one perturbation quantity."""
        rank = 1 if name in ("w", "wc", "f", "u_increment") else 0

        def get(k):
            val = getattr(self.at(k), name)
            if np.isscalar(val):
                return np.full(self.grid.shape, val)
            return val

        return TimeField(self.timegrid, self.grid, rank, get)


def build_perturbations(coeffs: CoefficientFields, mikados: MikadoSet, N: int,
                        check_resolution: bool = True) -> PerturbationBundle:
    return PerturbationBundle(coeffs, mikados, N, check_resolution)


def _w1(grid: GridSpec, vec: np.ndarray, r: float) -> float:
    """W^{1,r} norm of a vector field: L^r of |v| plus L^r of every |∂_i v|."""
    total = float(lp_array(np.sqrt((vec ** 2).sum(axis=0)), r))
    for i in range(grid.dim):
        dv = partial_array(grid, vec, i)
        total += float(lp_array(np.sqrt((dv ** 2).sum(axis=0)), r))
    return total


def _vec_lp(vec: np.ndarray, r: float) -> float:
    return float(lp_array(np.sqrt((vec ** 2).sum(axis=0)), r))


def perturbation_estimates(bundle: PerturbationBundle, coeffs: CoefficientFields, k: int,
                           p_tilde: float, eps: Optional[float] = None) -> dict:
    """Measured perturbation norms at sample k next to their predicted parameter scales."""
    s = bundle.at(k)
    grid = bundle.grid
    par = bundle.mikados.params
    prof = bundle.mikados.profiles
    p, pp = prof.p, conjugate(prof.p)
    lam, mu, om, nu = par.lam, par.mu, par.omega, par.nu
    a, b, d, N = prof.a, prof.b, grid.dim, bundle.N
    if eps is None:
        eps = d / p + d / p_tilde - d - 1
    geo = sum((lam * mu / nu) ** i for i in range(1, N + 1)) + (lam * mu) ** (N + 1) / nu ** N
    measured = {
        "theta_Lp": float(lp_array(s.theta, p)),
        "q_Lp": float(lp_array(s.q, p)),
        "theta_c": abs(s.theta_c),
        "q_c": abs(s.q_c),
        "w_Lpp": _vec_lp(s.w, pp),
        "w_W1": _w1(grid, s.w, p_tilde),
        "wc_Lpp": _vec_lp(s.wc, pp),
        "wc_W1": _w1(grid, s.wc, p_tilde),
        "f_Linf": _vec_lp(s.f, np.inf),
    }
    predicted = {
        "theta_Lp": 1.0,
        "q_Lp": mu ** b / om,
        "theta_c": mu ** (-b),
        "q_c": 1.0 / om,
        "w_Lpp": 1.0,
        "w_W1": (lam * mu + nu) / mu ** (1 + eps),
        "wc_Lpp": geo,
        "wc_W1": nu * geo / mu ** (1 + eps) if mu > 0 else geo,
        "f_Linf": lam * mu ** (1 + b),
    }
    return {"k": int(k), "t": float(bundle.timegrid.times[k]), "params": par.to_json(),
            "measured": measured, "predicted_scale": predicted}
