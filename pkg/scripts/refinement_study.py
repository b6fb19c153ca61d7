"""Continuity-defect residual of one step under K-refinement.

Runs the transport study (2D cosine seed) or the diffusion study (3D
manufactured diffusion seed) and prints one row per K plus the observed
orders.  Use --json to write the full study.
"""

import argparse
import json

from convint.mikado import MikadoParams
from convint.rates import refinement_study
from convint.scheme import manufactured_seed, plan_exponents, theorem13_seed
from convint.torus_grid import GridSpec, TimeGrid

PRESETS = {
    "transport": dict(d=2, n=512, Ks=(16, 32, 64), p=1.5, params=(1, 2.0, 1 / 16, 32), delta=1.0, eta=0.1),
    "diffusion": dict(d=3, n=64, Ks=(8, 16, 32), p=2.0, params=(1, 1.0, 1 / 16, 4), delta=0.5, eta=1.0),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("mode", choices=sorted(PRESETS))
    ap.add_argument("--n", type=int)
    ap.add_argument("--Ks", type=lambda s: [int(x) for x in s.split(",")])
    ap.add_argument("--json")
    args = ap.parse_args()
    cfg = dict(PRESETS[args.mode])
    grid = GridSpec(cfg["d"], args.n or cfg["n"])
    Ks = args.Ks or cfg["Ks"]
    if args.mode == "transport":
        plan = plan_exponents(cfg["p"], 1.0, grid.dim)
        make = lambda K: theorem13_seed(grid, TimeGrid(1.0, K))  # noqa: E731
    else:
        plan = plan_exponents(cfg["p"], 1.0, grid.dim, "diffusion")
        make = lambda K: manufactured_seed(grid, TimeGrid(1.0, K), equation="diffusion")  # noqa: E731

    def show(row):
        print(f"K={row.K:4d}  seed {row.seed_relative:.3e}  step {row.step_relative:.3e}  "
              f"div {row.div_relative:.1e}  alias {row.alias_fraction:.1e}  {row.seconds:.1f}s", flush=True)

    study = refinement_study(make, Ks, plan, MikadoParams(*cfg["params"]), cfg["delta"], cfg["eta"], log=show)
    print("orders", ", ".join(f"{o:.2f}" for o in study.orders), "pass", study.passed)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(study.to_json(), fh, indent=1)


if __name__ == "__main__":
    main()
