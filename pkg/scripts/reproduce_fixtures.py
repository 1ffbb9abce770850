"""Explore, train and compare agent vs baseline on the three fixture scenarios.

    python3 scripts/reproduce_fixtures.py --out runs/fixtures --seeds 0 1 2

Per fixture and seed this writes checkpoint.json / history.csv, then runs
both controllers over a 10 GB transfer and appends a row to summary.csv.
Expect about a minute of training per (fixture, seed) on one core.
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from automdt.baseline import BaselineConfig, run_baseline
from automdt.domain import UtilityConfig, derive_profile, explore
from automdt.ppo import TrainingConfig, save_result, train
from automdt.runtime import run_transfer
from automdt.scenarios import MB_PER_GB, load_fixture
from automdt.simulator import Simulator
from automdt import neural

FIXTURES = ("read_bn", "net_bn", "write_bn")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/fixtures")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--episodes", type=int, default=30000)
    ap.add_argument("--dataset-gb", type=float, default=10.0)
    ap.add_argument("--trials", type=int, default=10)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in FIXTURES:
        spec = load_fixture(name)
        sim = Simulator(spec)
        rng = np.random.default_rng(0)
        sim.reset(rng)
        prof = derive_profile(explore(sim, 600, spec.n_max, rng), UtilityConfig(spec.k))
        print(f"{name}: n*={tuple(prof.optimal)} b={prof.bottleneck:g} R_max={prof.r_max:.2f}")
        for seed in args.seeds:
            res = train(sim, prof, TrainingConfig(seed=seed, max_episodes=args.episodes))
            save_result(res, out / f"{name}_seed{seed}", k=spec.k, n_max=spec.n_max, profile=prof)
            ck = neural.Checkpoint(res.policy, res.value, spec.k, spec.n_max, prof)
            data = args.dataset_gb * MB_PER_GB
            for trial in range(args.trials):
                a = run_transfer(Simulator(spec), ck, data, rng=np.random.default_rng(trial), deterministic=True)
                b = run_baseline(Simulator(spec), data, BaselineConfig(k=spec.k),
                                 rng=np.random.default_rng(trial), profile=prof)
                rows.append((name, seed, trial, res.state.episode, res.state.best_mean_step, res.converged,
                             a.completion_s, b.completion_s, a.steps_to_fraction(), b.steps_to_fraction()))
            mine = [r for r in rows if r[0] == name and r[1] == seed]
            print(f"  seed {seed}: episodes={res.state.episode} best={res.state.best_mean_step:.3f} "
                  f"agent {np.mean([r[6] for r in mine]):.2f}s vs baseline {np.mean([r[7] for r in mine]):.2f}s")

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "seed", "trial", "episodes", "best_mean_step", "converged",
                    "agent_completion_s", "baseline_completion_s", "agent_steps_90", "baseline_steps_90"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
