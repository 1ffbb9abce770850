"""Brute-force steady-state utility over [1, n_max]^3 for one scenario.

    python3 scripts/utility_grid.py read_bn --out runs/grid_read_bn.csv

Each cell runs a fresh simulator for ``--windows`` windows and keeps the mean
utility of the last ``--keep``. Prints the argmax; takes a few minutes.
"""

import argparse
import csv
import itertools

import numpy as np

from automdt.scenarios import resolve_scenario
from automdt.simulator import Simulator


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scenario")
    ap.add_argument("--n-max", type=int, default=30)
    ap.add_argument("--windows", type=int, default=30)
    ap.add_argument("--keep", type=int, default=10)
    ap.add_argument("--k", type=float, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    spec = resolve_scenario(args.scenario)
    if args.k is not None:
        spec = spec.replace(k=args.k)
    cells = []
    for n in itertools.product(range(1, args.n_max + 1), repeat=3):
        sim = Simulator(spec)
        us = [sim.get_utility(n).utility for _ in range(args.windows)]
        cells.append((*n, float(np.mean(us[-args.keep:]))))
    best = max(cells, key=lambda c: c[3])
    print(f"argmax {best[:3]} utility {best[3]:.2f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_r", "n_n", "n_w", "utility"])
            w.writerows(cells)


if __name__ == "__main__":
    main()
