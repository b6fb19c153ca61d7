"""Command-line front end.

Subcommands: verify, mikado, step, iterate, rates, seed.  Reports are JSON on
stdout (or --out); field dumps use the MKFD format.  Exit codes: 0 success,
1 failed verification, 2 configuration error, 3 infeasible exponents,
4 resolution budget exceeded.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Optional

import numpy as np

from .calculus import (
    antidiv_bilinear,
    calD,
    div,
    inv_laplacian,
    random_bandlimited,
)
from .errors import BudgetExceeded, ConvintError, InfeasibleError
from .mikado import (
    MikadoParams,
    build_lines,
    build_mikado_set,
    build_profiles,
    derive_constants,
    mikado_report,
)
from .scheme import (
    IterationConfig,
    SearchSpace,
    choose_lambda,
    iterate,
    manufactured_seed,
    plan_exponents,
    proposition_step,
    required_resolution,
    theorem13_seed,
)
from .torus_grid import GridSpec, ScalarField, TimeGrid, dilate, dump_mkfd

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_BUDGET = 0, 1, 2, 3, 4
COMMANDS = ("verify", "mikado", "step", "iterate", "rates", "seed")


@dataclass
class RunConfig:
    command: str = "verify"
    d: int = 2
    n: int = 256
    K: int = 16
    T: float = 1.0
    p: float = 1.5
    ptilde: float = 1.0
    delta: Optional[float] = None
    eta: Optional[float] = None
    mode: str = "empirical"
    diffusion: bool = False
    budget_n: int = 1024
    out: Optional[str] = None
    dump: Optional[str] = None
    seed_rng: int = 0
    lambdas: Optional[list] = None
    lam: Optional[int] = None
    mu: Optional[float] = None
    omega: Optional[float] = None
    nu: Optional[int] = None
    N: Optional[int] = None
    seed_kind: str = "theorem13"
    steps: int = 3
    lemma: str = "quadr"
    sigma: float = 1.0

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if self.d not in (2, 3):
            raise ValueError("--d must be 2 or 3")
        if self.n < 4 or self.n & (self.n - 1):
            raise ValueError("--n must be a power of two >= 4")
        if self.K < 8:
            raise ValueError("--K must be at least 8")
        if not self.T > 0:
            raise ValueError("--T must be positive")
        if self.mode not in ("strict", "empirical"):
            raise ValueError("--mode must be strict or empirical")
        if self.seed_kind not in ("theorem13", "manufactured"):
            raise ValueError("--seed-kind must be theorem13 or manufactured")
        for name in ("delta", "eta"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"--{name} must be positive")


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="convint", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    ap.add_argument("--d", type=int)
    ap.add_argument("--n", type=int)
    ap.add_argument("--K", type=int)
    ap.add_argument("--T", type=float)
    ap.add_argument("--p", type=float)
    ap.add_argument("--ptilde", type=float)
    ap.add_argument("--delta", type=float)
    ap.add_argument("--eta", type=float)
    ap.add_argument("--mode", choices=("strict", "empirical"))
    ap.add_argument("--diffusion", action="store_true", default=None)
    ap.add_argument("--budget-n", dest="budget_n", type=int)
    ap.add_argument("--out", help="write the JSON report here instead of stdout")
    ap.add_argument("--dump", help="directory for MKFD field dumps")
    ap.add_argument("--seed-rng", dest="seed_rng", type=int)
    ap.add_argument("--lambdas", type=_int_list)
    ap.add_argument("--lam", type=int)
    ap.add_argument("--mu", type=float)
    ap.add_argument("--omega", type=float)
    ap.add_argument("--nu", type=int)
    ap.add_argument("--N", type=int)
    ap.add_argument("--seed-kind", dest="seed_kind", choices=("theorem13", "manufactured"))
    ap.add_argument("--steps", type=int)
    ap.add_argument("--lemma", choices=("holder", "mikado", "time1", "quadr", "lin", "time2",
                                        "q", "corr", "chi", "diffusion"))
    ap.add_argument("--sigma", type=float)
    return ap


def load_config(argv) -> RunConfig:
    args = build_parser().parse_args(argv)
    values = {}
    if args.config:
        with open(args.config) as fh:
            values.update(json.load(fh))
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for name, val in vars(args).items():
        if name != "config" and val is not None:
            values[name] = val
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- JSON

def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Fraction):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats by strings so the output stays strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dumps(obj) -> str:
    raw = json.loads(json.dumps(obj, default=_json_default))
    return json.dumps(_clean(raw), sort_keys=True, indent=2)


def emit(cfg: RunConfig, report) -> None:
    text = dumps(report)
    if cfg.out:
        os.makedirs(os.path.dirname(os.path.abspath(cfg.out)), exist_ok=True)
        with open(cfg.out, "w") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


# ---------------------------------------------------------------- scenarios

def make_seed(cfg: RunConfig):
    grid = GridSpec(cfg.d, cfg.n)
    tg = TimeGrid(cfg.T, cfg.K)
    eq = "diffusion" if cfg.diffusion else "transport"
    if cfg.seed_kind == "manufactured":
        return manufactured_seed(grid, tg, equation=eq)
    return theorem13_seed(grid, tg, equation=eq)


def _explicit_params(cfg: RunConfig) -> Optional[MikadoParams]:
    vals = (cfg.lam, cfg.mu, cfg.omega, cfg.nu)
    if all(v is None for v in vals):
        return None
    if any(v is None for v in vals):
        raise ValueError("--lam, --mu, --omega and --nu must be given together")
    return MikadoParams(cfg.lam, cfg.mu, cfg.omega, cfg.nu)


def _default_mikado_params(d: int, n: int) -> MikadoParams:
    mu = float(max(1, n // 128)) if d == 2 else 1.0
    return MikadoParams(1, mu, 1.0, max(1, min(n // 16, 32)))


# ---------------------------------------------------------------- commands

def _rel_l2(a, b) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)) / max(np.sqrt(np.mean(b ** 2)), 1e-300))


def cmd_verify(cfg: RunConfig) -> tuple:
    grid = GridSpec(cfg.d, cfg.n)
    rng = np.random.default_rng(cfg.seed_rng)
    band = 6 if cfg.d == 2 else 3
    records = []

    def add(suite, check, value, tol):
        records.append({"suite": suite, "check": check, "value": float(value), "tol": tol,
                        "pass": bool(value <= tol)})

    for trial in range(5):
        f = random_bandlimited(grid, rng, band=band, zero_mean=False)
        g = random_bandlimited(grid, rng, band=band)
        prod = f.values * g.values
        for N in (1, 2, 3):
            R = antidiv_bilinear(f, g, N)
            add("calculus", f"bilinear_identity[N={N},trial={trial}]",
                _rel_l2(div(R).values, prod - prod.mean()), 1e-9)
        u = inv_laplacian(g)
        add("calculus", f"inverse_laplacian[trial={trial}]", _rel_l2(calD(2, u).values, g.values), 1e-10)
        lhs = calD(2, dilate(g, 2)).values
        rhs = 4 * dilate(ScalarField(grid, calD(2, g).values), 2).values
        add("calculus", f"scaling_law[k=2,trial={trial}]", _rel_l2(lhs, rhs), 1e-10)
    par = _explicit_params(cfg) or _default_mikado_params(cfg.d, cfg.n)
    lines = build_lines(cfg.d)
    prof = build_profiles(lines, cfg.p)
    ms = build_mikado_set(prof, lines, par)
    consts = derive_constants(cfg.p, cfg.ptilde, cfg.d, prof)
    for rec in mikado_report(ms, grid, consts, cfg.ptilde, rng_seed=cfg.seed_rng):
        records.append({"suite": "mikado", "check": rec["identity"], "value": rec["measured"],
                        "tol": rec["bound"], "pass": rec["pass"]})
    ok = all(r["pass"] for r in records)
    return {"command": "verify", "d": cfg.d, "n": cfg.n, "records": records, "pass": ok}, \
        EXIT_OK if ok else EXIT_FAILED


def cmd_mikado(cfg: RunConfig) -> tuple:
    grid = GridSpec(cfg.d, cfg.n)
    par = _explicit_params(cfg) or _default_mikado_params(cfg.d, cfg.n)
    lines = build_lines(cfg.d)
    prof = build_profiles(lines, cfg.p)
    ms = build_mikado_set(prof, lines, par)
    consts = derive_constants(cfg.p, cfg.ptilde, cfg.d, prof)
    records = mikado_report(ms, grid, consts, cfg.ptilde, rng_seed=cfg.seed_rng)
    return {"command": "mikado", "params": par.to_json(), "constants": asdict(consts),
            "r0": prof.r0, "sharpness": prof.sharpness, "records": records}, EXIT_OK


def _dump_state(directory: str, state) -> list:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name in ("rho", "u", "R"):
        path = os.path.join(directory, f"{name}.mkfd")
        dump_mkfd(path, getattr(state, name))
        paths.append(path)
    return paths


def _schedule(cfg: RunConfig, seed) -> tuple:
    from .scheme import c_t_norm
    delta = cfg.delta if cfg.delta is not None else c_t_norm(seed, "R", 1) / 4
    eta = cfg.eta if cfg.eta is not None else cfg.sigma * delta ** (0.5 - 1 / cfg.p)
    return delta, eta


def cmd_step(cfg: RunConfig) -> tuple:
    plan = plan_exponents(cfg.p, cfg.ptilde, cfg.d, "diffusion" if cfg.diffusion else "transport")
    seed = make_seed(cfg)
    delta, eta = _schedule(cfg, seed)
    par = _explicit_params(cfg)
    search = SearchSpace(lams=tuple(cfg.lambdas)) if cfg.lambdas else SearchSpace()
    if par is None:
        lam, par = choose_lambda(plan, seed, delta, eta, cfg.mode, cfg.budget_n, search, cfg.N)
    N = cfg.N if cfg.N is not None else (3 if cfg.mode == "empirical" else plan.N)
    new, rep = proposition_step(seed, delta, eta, plan, par.lam, par, N, cfg.mode)
    out = {"command": "step", "plan": plan.to_json(), "delta": delta, "eta": eta, "N": N,
           "report": rep.to_json(), "all_pass": rep.all_pass}
    if cfg.dump:
        out["dumps"] = _dump_state(cfg.dump, new)
    return out, EXIT_OK


def cmd_iterate(cfg: RunConfig) -> tuple:
    seed = make_seed(cfg)
    search = SearchSpace(lams=tuple(cfg.lambdas)) if cfg.lambdas else SearchSpace()
    conf = IterationConfig(cfg.p, cfg.ptilde, delta0=cfg.delta, sigma=cfg.sigma, max_steps=cfg.steps,
                           mode=cfg.mode, budget_n=cfg.budget_n, search=search, N=cfg.N,
                           diffusion=cfg.diffusion)
    try:
        res = iterate(seed, conf)
    except BudgetExceeded as exc:
        manifest = exc.partial.manifest if exc.partial is not None else {}
        manifest.update({"command": "iterate", "error": "BudgetExceeded", "blocking": exc.blocking,
                         "message": str(exc)})
        emit(cfg, manifest)
        sys.stderr.write(f"budget exceeded: {exc} (blocking: {exc.blocking})\n")
        return None, EXIT_BUDGET
    manifest = dict(res.manifest)
    manifest["command"] = "iterate"
    if cfg.dump:
        manifest["dumps"] = _dump_state(cfg.dump, res.states[-1])
    return manifest, EXIT_OK


def cmd_rates(cfg: RunConfig) -> tuple:
    from . import rates
    if cfg.lemma == "holder":
        f, g = rates.holder_fields(GridSpec(cfg.d, cfg.n))
        lams = cfg.lambdas or [4, 8, 16, 32]
        return {"command": "rates", "lemma": "holder", "fit": rates.holder_rate(f, g, lams, cfg.p)}, EXIT_OK
    if cfg.lemma == "mikado":
        fits = rates.mikado_law_fits(cfg.p, cfg.ptilde, cfg.d, cfg.n)
        return {"command": "rates", "lemma": "mikado", "fits": [f.to_json() for f in fits]}, EXIT_OK
    sweeps = dict(rates.COMPONENT_SWEEPS)
    if cfg.lambdas and cfg.lemma == "quadr":
        sweeps["quadr"] = ("lambda with nu = 8 lambda", [(lam, 1.0, 1.0, 8 * lam) for lam in cfg.lambdas])
    n = max(cfg.n, rates.sweep_grid_size({cfg.lemma: sweeps[cfg.lemma]})) \
        if cfg.lemma in sweeps else cfg.n
    grid = GridSpec(cfg.d, n)
    tg = TimeGrid(cfg.T, cfg.K)
    k = 1
    if cfg.lemma == "chi":
        delta = cfg.delta if cfg.delta is not None else 1.0
        eta = cfg.eta if cfg.eta is not None else 0.1
        par = _explicit_params(cfg) or _default_mikado_params(cfg.d, n)
        rep = rates.chi_bound(theorem13_seed(grid, tg), delta, eta, cfg.p, par)
        return {"command": "rates", "lemma": "chi", "result": rep}, EXIT_OK
    delta = cfg.delta if cfg.delta is not None else 0.5
    eta = cfg.eta if cfg.eta is not None else 1.0
    if cfg.lemma == "diffusion":
        state = manufactured_seed(grid, tg, equation="diffusion")
        mus = (1.0, 1.5, 2.0)
        pts = [(1, float(mu), 0.0625, int(4 * mu)) for mu in mus]
        fit = rates.diffusion_gradient_fit(state, delta, eta, cfg.p, k, pts)
        return {"command": "rates", "lemma": "diffusion", "fits": [fit.to_json()]}, EXIT_OK
    state = manufactured_seed(grid, tg)
    log = []
    fits = rates.component_law_fits(state, delta, eta, cfg.p, k, sweeps=sweeps, kinds=[cfg.lemma], log=log)
    return {"command": "rates", "lemma": cfg.lemma, "n": n, "t": float(tg.times[k]),
            "fits": [f.to_json() for f in fits], "samples": log}, EXIT_OK


def cmd_seed(cfg: RunConfig) -> tuple:
    seed = make_seed(cfg)
    out = {"command": "seed", "kind": cfg.seed_kind, "d": cfg.d, "n": cfg.n, "K": cfg.K, "T": cfg.T,
           "meta": seed.meta}
    if cfg.dump or cfg.out:
        directory = cfg.dump or os.path.join(os.path.dirname(os.path.abspath(cfg.out)), "seed")
        out["dumps"] = _dump_state(directory, seed)
    return out, EXIT_OK


HANDLERS = {"verify": cmd_verify, "mikado": cmd_mikado, "step": cmd_step, "iterate": cmd_iterate,
            "rates": cmd_rates, "seed": cmd_seed}


def run(argv=None) -> int:
    try:
        cfg = load_config(argv)
    except SystemExit as exc:                      # argparse already printed the message
        return EXIT_CONFIG if exc.code else EXIT_OK
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    try:
        report, code = HANDLERS[cfg.command](cfg)
    except InfeasibleError as exc:
        sys.stderr.write(f"infeasible: {exc}\n")
        return EXIT_INFEASIBLE
    except BudgetExceeded as exc:
        sys.stderr.write(f"budget exceeded: {exc} (blocking: {exc.blocking})\n")
        return EXIT_BUDGET
    except (ConvintError, ValueError) as exc:
        sys.stderr.write(f"config error: {type(exc).__name__}: {exc}\n")
        return EXIT_CONFIG
    if report is not None:
        emit(cfg, report)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
