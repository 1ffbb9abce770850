"""How the penalty base k moves the utility-optimal tuple on every fixture.

    python3 scripts/k_sweep.py --k 1.005 1.01 1.02 1.05 1.1

Uses the steady-state fluid model behind ``automdt sweep-k``.
"""

import argparse

from automdt.cli import DEFAULT_K_GRID, steady_state_argmax
from automdt.scenarios import load_fixture


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--k", type=float, nargs="+", default=list(DEFAULT_K_GRID))
    args = ap.parse_args()
    print(f"{'scenario':<9} {'k':>6}  tuple         rate")
    for name in ("read_bn", "net_bn", "write_bn"):
        spec = load_fixture(name)
        for k in args.k:
            _, n, rate = steady_state_argmax(spec, k, spec.n_max)
            print(f"{name:<9} {k:>6g}  {str(n):<12} {rate:>6.0f}")


if __name__ == "__main__":
    main()
