"""Calibrate the operator-ratio probe budgets.

For each (kind, d, p, k) the budget is 1.25 times the largest ratio seen over
random band-limited zero-mean fields.  Prints a dictionary literal to paste
into calculus.PROBE_BUDGETS.
"""

import argparse

import numpy as np

from convint.calculus import probe_ratio, random_bandlimited
from convint.torus_grid import GridSpec

GRIDS = {2: (64, 6), 3: (16, 3)}
CASES = ([("cz", p, 1) for p in (1.5, 2.0, 3.0)]
         + [("antideriv_est", p, k) for p in (1.5, 2.0, 3.0) for k in (1, 2)]
         + [("antideriv_end", p, k) for p in (1.0, np.inf) for k in (1, 2)])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fields", type=int, default=100)
    ap.add_argument("--margin", type=float, default=1.25)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()
    budgets = {}
    for d, (n, band) in GRIDS.items():
        g = GridSpec(d, n)
        for kind, p, k in CASES:
            rng = np.random.default_rng(args.seed)
            worst = max(probe_ratio(kind, random_bandlimited(g, rng, band=band), p, k)
                        for _ in range(args.fields))
            budgets[(kind, d, float(p), k)] = float(f"{args.margin * worst:.4g}")
    print("PROBE_BUDGETS = {")
    for key, val in budgets.items():
        print(f"    {key!r}: {val!r},")
    print("}")


if __name__ == "__main__":
    main()
