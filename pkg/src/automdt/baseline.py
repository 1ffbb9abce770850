"""Marlin-style comparator: three independent hill-climbers, one per stage.

Each optimizer sees only its own stage utility ``t_i / k**n_i``. Rule: the
first call probes one thread upward; afterwards an improvement (or tie)
repeats the last move, a drop reverses direction and halves the step
(never below 1). This is a documented stand-in, not Marlin's own code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .domain import ConcurrencyTuple, SystemProfile, stage_utility
from .runtime import TransferReport, drive


@dataclass
class UnivariateState:
    n: int
    n_max: int
    step: int = 2
    direction: int = 1
    prev_n: int | None = None
    prev_utility: float | None = None

    def __post_init__(self):
        self.n = min(max(int(self.n), 1), self.n_max)
        self.step = max(1, int(self.step))


def baseline_step(state: UnivariateState, utility: float) -> int:
    """Observe the utility of ``state.n`` and move to the next thread count."""
    if not math.isfinite(utility):
        raise ValueError(f"utility must be finite, got {utility}")
    if state.prev_utility is None:
        move = 1
    else:
        if utility < state.prev_utility:
            state.direction = -state.direction
            state.step = max(1, state.step // 2)
        move = state.direction * state.step
    state.prev_n = state.n
    state.prev_utility = utility
    state.n = min(max(state.n + move, 1), state.n_max)
    return state.n


@dataclass
class BaselineConfig:
    k: float = 1.02
    initial_step: int = 2
    # online tuners start low and climb; None reuses the random warm-up tuple
    start: tuple[int, int, int] | None = (1, 1, 1)
    stall_limit: int = 30
    max_steps: int = 100_000


def run_baseline(env, dataset_bytes: float, cfg: BaselineConfig | None = None, *, rng=None,
                 profile: SystemProfile | None = None) -> TransferReport:
    cfg = cfg or BaselineConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    if profile is not None and hasattr(env, "attach_profile"):
        env.attach_profile(profile)
    states: list[UnivariateState] = []

    def controller(_obs, outcome):
        if not states:
            states.extend(UnivariateState(n, env.n_max, cfg.initial_step) for n in outcome.threads)
        nxt = []
        for i, st in enumerate(states):
            nxt.append(baseline_step(st, stage_utility(outcome.sample[i], outcome.threads[i], cfg.k)))
        return ConcurrencyTuple(*nxt)

    return drive(env, controller, dataset_bytes, rng, stall_limit=cfg.stall_limit, max_steps=cfg.max_steps,
                 profile=profile, label="baseline",
                 start=cfg.start)
