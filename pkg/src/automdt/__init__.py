"""Joint read/network/write concurrency tuning: simulator, PPO agent, controller, baseline."""

from .domain import (
    ConcurrencyTuple,
    ExplorationLog,
    SystemProfile,
    ThroughputSample,
    UtilityConfig,
    derive_profile,
    explore,
    theoretical_max_reward,
    total_utility,
)
from .simulator import ScenarioSpec, Simulator, StepOutcome

__version__ = "0.1.0"
