"""Command-line harness: explore, train, run, baseline, compare, sweep-k, rerun.

Every command that writes to ``--out`` also writes ``manifest.json`` holding
the fully resolved configuration (scenario included), so
``automdt rerun DIR/manifest.json`` repeats the run exactly.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import BaselineConfig, run_baseline
from .domain import SystemProfile, UtilityConfig, derive_profile, explore
from .errors import CheckpointError, ConfigurationError, InsufficientExplorationError, TransferStallError
from .neural import load_checkpoint
from .ppo import TrainingConfig, config_dict, save_result, train
from .runtime import TransferReport, run_transfer
from .scenarios import MB_PER_GB, resolve_scenario
from .simulator import ScenarioSpec, Simulator


COMMANDS = ("explore", "train", "run", "baseline", "compare", "sweep-k")
DEFAULT_K_GRID = (1.005, 1.01, 1.02, 1.03, 1.05, 1.1)


@dataclass
class ExperimentConfig:
    command: str
    scenario: str | None = None
    out: str | None = None
    seed: int = 0
    probes: int = 600
    episodes: int = 30000
    update_epochs: int = 1
    k: float | None = None
    n_max: int | None = None
    dataset_gb: float = 10.0
    deterministic: bool = False
    profile: str | None = None
    checkpoint: str | None = None
    reports: list = field(default_factory=list)
    k_grid: list = field(default_factory=list)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigurationError(f"unknown command {self.command!r}")
        checks = {"seed": int, "probes": int, "episodes": int, "update_epochs": int, "dataset_gb": (int, float)}
        for name, kind in checks.items():
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, kind):
                raise ConfigurationError(f"{name} must be {kind}, got {v!r}")
        if self.probes < 1 or self.episodes < 1 or self.update_epochs < 1:
            raise ConfigurationError("probes, episodes and update_epochs must be >= 1")
        if self.dataset_gb < 0:
            raise ConfigurationError("dataset_gb must be >= 0")
        if self.k is not None and not self.k > 1:
            raise ConfigurationError(f"k must be > 1, got {self.k}")
        if self.n_max is not None and (isinstance(self.n_max, bool) or not isinstance(self.n_max, int)
                                       or self.n_max < 1):
            raise ConfigurationError(f"n_max must be an integer >= 1, got {self.n_max!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**d)


def _default_seed() -> int:
    raw = os.environ.get("AUTOMDT_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"AUTOMDT_SEED must be an integer, got {raw!r}") from None


def _abs(path):
    return None if path is None else str(Path(path).resolve())


def _writable_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise ConfigurationError(f"output directory {out} is not writable")
    return out


def _resolved_spec(cfg: ExperimentConfig, scenario: dict | None = None) -> ScenarioSpec:
    if scenario is not None:
        # a recorded scenario already has the k / n_max overrides applied
        return ScenarioSpec.from_dict(scenario)
    spec = resolve_scenario(cfg.scenario)
    changes = {}
    if cfg.k is not None:
        changes["k"] = float(cfg.k)
    if cfg.n_max is not None:
        changes["n_max"] = cfg.n_max
    return spec.replace(**changes) if changes else spec


def write_manifest(out: Path, cfg: ExperimentConfig, spec: ScenarioSpec | None, extra: dict | None = None):
    manifest = {
        "automdt_version": __version__,
        "command": cfg.command,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "scenario": spec.to_dict() if spec is not None else None,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _load_profile(path) -> SystemProfile:
    return SystemProfile.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- commands


def cmd_explore(cfg: ExperimentConfig, spec: ScenarioSpec) -> int:
    out = _writable_dir(cfg.out)
    rng = np.random.default_rng(cfg.seed)
    sim = Simulator(spec)
    sim.reset(rng)
    exploration = explore(sim, cfg.probes, spec.n_max, rng, window=spec.window)
    profile = derive_profile(exploration, UtilityConfig(spec.k))
    exploration.to_csv(out / "exploration.csv")
    (out / "profile.json").write_text(json.dumps(profile.to_dict(), indent=2) + "\n")
    write_manifest(out, cfg, spec)
    print(f"profile: n*={tuple(profile.optimal)} b={profile.bottleneck:g} R_max={profile.r_max:.6g}")
    return 0


def cmd_train(cfg: ExperimentConfig, spec: ScenarioSpec) -> int:
    out = _writable_dir(cfg.out)
    profile = _load_profile(cfg.profile)
    tcfg = TrainingConfig(max_episodes=cfg.episodes, seed=cfg.seed, update_epochs=cfg.update_epochs)
    result = train(Simulator(spec), profile, tcfg, progress_every=1000)
    save_result(result, out, k=spec.k, n_max=spec.n_max, profile=profile)
    write_manifest(out, cfg, spec, {"training": config_dict(tcfg)})
    state = result.state
    print(f"episodes={state.episode} converged={result.converged} "
          f"best_mean_step_reward={state.best_mean_step:.4f} seconds={result.seconds:.1f}")
    return 0


def _report_line(rep: TransferReport) -> str:
    mc = ", ".join(f"{x:.2f}" for x in rep.mean_concurrency())
    return (f"{rep.controller}: completion={rep.completion_s:.3f}s steps={rep.steps} "
            f"steps_to_90pct={rep.steps_to_fraction(0.9)} mean_concurrency=({mc})")


def cmd_run(cfg: ExperimentConfig, spec: ScenarioSpec) -> int:
    ck = load_checkpoint(cfg.checkpoint)
    rng = np.random.default_rng(cfg.seed)
    rep = run_transfer(Simulator(spec), ck, cfg.dataset_gb * MB_PER_GB, rng=rng,
                       deterministic=cfg.deterministic)
    if cfg.out:
        out = _writable_dir(cfg.out)
        rep.save(out)
        write_manifest(out, cfg, spec)
    print(_report_line(rep))
    return 0


def cmd_baseline(cfg: ExperimentConfig, spec: ScenarioSpec) -> int:
    profile = _load_profile(cfg.profile) if cfg.profile else None
    rng = np.random.default_rng(cfg.seed)
    rep = run_baseline(Simulator(spec), cfg.dataset_gb * MB_PER_GB, BaselineConfig(k=spec.k), rng=rng,
                       profile=profile)
    if cfg.out:
        out = _writable_dir(cfg.out)
        rep.save(out)
        write_manifest(out, cfg, spec)
    print(_report_line(rep))
    return 0


COMPARE_HEADER = ("report", "controller", "completion_s", "steps", "steps_to_90pct",
                  "mean_n_r", "mean_n_n", "mean_n_w")


def compare_table(paths) -> list[tuple]:
    rows = []
    for p in paths:
        rep = TransferReport.load(p)
        rows.append((str(p), rep.controller, rep.completion_s, rep.steps, rep.steps_to_fraction(0.9),
                     *rep.mean_concurrency()))
    return rows


def cmd_compare(cfg: ExperimentConfig, spec=None) -> int:
    rows = compare_table(cfg.reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_HEADER)
    for r in rows:
        w.writerow(r)
    text = buf.getvalue()
    width = max(len(r[0]) for r in rows)
    print(f"{'report':<{width}}  {'controller':<10} {'completion_s':>12} {'steps_to_90%':>12}  mean concurrency")
    for r in rows:
        s90 = "-" if r[4] is None else str(r[4])
        print(f"{r[0]:<{width}}  {r[1]:<10} {r[2]:>12.3f} {s90:>12}  ({r[5]:.2f}, {r[6]:.2f}, {r[7]:.2f})")
    if len(rows) == 2 and rows[1][2] > 0:
        print(f"completion ratio (first/second): {rows[0][2] / rows[1][2]:.3f}")
    if cfg.out:
        out = _writable_dir(cfg.out)
        (out / "compare.csv").write_text(text)
        write_manifest(out, cfg, None)
    return 0


def steady_state_argmax(spec: ScenarioSpec, k: float, n_max: int | None = None):
    """Utility argmax under a fluid model: every stage carries the end-to-end
    rate min_i min(n_i * tpt_i, cap_i) once buffers settle."""
    n_max = n_max or spec.n_max
    n = np.arange(1, n_max + 1)
    best = None
    stage_rate = [np.minimum(n * tpt, cap) for tpt, cap in zip(spec.tpt, spec.caps)]
    for a, b, c in itertools.product(range(n_max), repeat=3):
        rate = min(stage_rate[0][a], stage_rate[1][b], stage_rate[2][c])
        u = rate * (k ** -(a + 1) + k ** -(b + 1) + k ** -(c + 1))
        if best is None or u > best[0]:
            best = (u, (a + 1, b + 1, c + 1), rate)
    return best


SWEEP_HEADER = ("k", "n_r", "n_n", "n_w", "throughput", "utility")


def cmd_sweep_k(cfg: ExperimentConfig, spec: ScenarioSpec) -> int:
    grid = [float(k) for k in (cfg.k_grid or DEFAULT_K_GRID)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    print(f"{'k':>7} {'n_r':>4} {'n_n':>4} {'n_w':>4} {'throughput':>11} {'utility':>11}")
    for k in grid:
        u, (a, b, c), rate = steady_state_argmax(spec, k)
        w.writerow((repr(k), a, b, c, repr(float(rate)), repr(float(u))))
        print(f"{k:>7g} {a:>4} {b:>4} {c:>4} {rate:>11.1f} {u:>11.1f}")
    if cfg.out:
        out = _writable_dir(cfg.out)
        (out / "sweep_k.csv").write_text(buf.getvalue())
        write_manifest(out, cfg, spec)
    return 0


HANDLERS = {
    "explore": cmd_explore,
    "train": cmd_train,
    "run": cmd_run,
    "baseline": cmd_baseline,
    "compare": cmd_compare,
    "sweep-k": cmd_sweep_k,
}


def execute(cfg: ExperimentConfig, scenario: dict | None = None) -> int:
    spec = None
    if cfg.command != "compare":
        spec = _resolved_spec(cfg, scenario)
    return HANDLERS[cfg.command](cfg, spec)


# ---------------------------------------------------------------- argv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="automdt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, *, out_required=True, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True, help="fixture name (read_bn, net_bn, write_bn) or JSON path")
            p.add_argument("--k", type=float, default=None, help="override the utility penalty base")
            p.add_argument("--n-max", type=int, default=None, help="override the per-stage thread limit")
        p.add_argument("--out", required=out_required, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="RNG seed (fallback: $AUTOMDT_SEED, then 0)")

    p = sub.add_parser("explore", help="random-threads run -> exploration.csv + profile.json")
    common(p)
    p.add_argument("--probes", type=int, default=600)

    p = sub.add_parser("train", help="PPO training -> checkpoint.json + history.csv")
    common(p)
    p.add_argument("--profile", required=True)
    p.add_argument("--episodes", type=int, default=30000)
    p.add_argument("--update-epochs", type=int, default=1)

    p = sub.add_parser("run", help="drive a transfer with a trained checkpoint -> report")
    common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset-gb", type=float, default=10.0)
    p.add_argument("--deterministic", action="store_true", help="use the policy mean instead of sampling")

    p = sub.add_parser("baseline", help="per-stage hill-climbing comparator -> report")
    common(p, out_required=False)
    p.add_argument("--profile", default=None, help="profile.json for targets and reward scaling")
    p.add_argument("--dataset-gb", type=float, default=10.0)

    p = sub.add_parser("compare", help="summary table of two or more report.json files")
    p.add_argument("reports", nargs="+")
    common(p, out_required=False, scenario=False)

    p = sub.add_parser("sweep-k", help="steady-state utility argmax for a grid of k values")
    p.add_argument("--scenario", required=True)
    p.add_argument("--k", type=float, nargs="+", default=None, dest="k_grid", help="k values to sweep")
    p.add_argument("--n-max", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write outputs here instead of the recorded directory")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig) if hasattr(args, f.name)}
    if values.get("seed") is None:
        values["seed"] = _default_seed()
    for key in ("profile", "checkpoint", "out"):
        if values.get(key) is not None:
            values[key] = _abs(values[key])
    if "reports" in values:
        values["reports"] = [_abs(p) for p in values["reports"]]
    if values.get("k_grid") is None:
        values.pop("k_grid", None)
    scenario = values.get("scenario")
    if scenario is not None and Path(scenario).exists():
        values["scenario"] = _abs(scenario)
    return ExperimentConfig(**values)


def rerun(manifest_path, out=None) -> int:
    manifest = json.loads(Path(manifest_path).read_text())
    if not isinstance(manifest, dict) or "config" not in manifest:
        raise ConfigurationError(f"{manifest_path}: not an automdt manifest")
    cfg = ExperimentConfig.from_dict(manifest["config"])
    if out is not None:
        cfg.out = _abs(out)
    return execute(cfg, manifest.get("scenario"))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            return rerun(args.manifest, args.out)
        return execute(config_from_args(args))
    except (ConfigurationError, CheckpointError, InsufficientExplorationError, TransferStallError,
            OSError, KeyError, ValueError) as exc:
        print(f"automdt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
