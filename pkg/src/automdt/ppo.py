"""PPO training loop: rollouts, discounted returns, one clipped actor-critic
update per episode, best-episode tracking and the stop rule."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import neural
from .domain import SystemProfile
from .errors import ConfigurationError, NonFiniteLossError
from .runtime import act

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    steps_per_episode: int = 10
    max_episodes: int = 30000
    lr: float = 3e-4
    gamma: float = 0.99
    clip: float = 0.2
    entropy_coef: float = 0.1
    stagnation_limit: int = 1000
    convergence_fraction: float = 0.9
    update_epochs: int = 1
    hidden: int = neural.HIDDEN_DIM
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigurationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 < self.clip < 1:
            raise ConfigurationError(f"clip must lie in (0, 1), got {self.clip}")
        if self.steps_per_episode < 1:
            raise ConfigurationError("steps_per_episode must be >= 1")
        if self.update_epochs < 1:
            raise ConfigurationError("update_epochs must be >= 1")


@dataclass
class Trajectory:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    tuples: list = field(default_factory=list)
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self):
        return len(self.rewards)

    @property
    def episode_reward(self) -> float:
        return float(np.sum(self.rewards))


@dataclass
class TrainingState:
    episode: int = 0  # episodes completed so far
    best_reward: float = 0.0
    stagnant: int = 0
    r_max: float = 1.0
    steps_per_episode: int = 10
    history: list = field(default_factory=list)

    @property
    def best_mean_step(self) -> float:
        return self.best_reward / self.steps_per_episode


HISTORY_HEADER = ("episode", "ep_reward", "mean_step_reward", "actor_loss", "critic_loss",
                  "entropy", "best_reward", "stagnant")


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=float)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def clipped_objective(ratio: float, advantage: float, eps: float) -> float:
    """Pessimistic surrogate; the actor loss is its negation."""
    clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    return min(ratio * advantage, clipped * advantage)


def converged(state: TrainingState, cfg: TrainingConfig) -> bool:
    # episode reward is a sum over steps, R_max a per-step ceiling: compare means
    return (state.best_mean_step >= cfg.convergence_fraction * state.r_max
            and state.stagnant >= cfg.stagnation_limit)


def run_episode(env, policy, steps: int, rng: np.random.Generator, obs=None) -> Trajectory:
    if obs is None:
        obs = env.reset(rng)
    n_max = env.n_max
    observations = np.empty((steps, len(obs)))
    actions = np.empty((steps, 3))
    rewards = np.empty(steps)
    log_probs = np.empty(steps)
    tuples = []
    for m in range(steps):
        mean, std = neural.policy_forward(policy, obs)
        raw, threads = act(policy, obs, rng, n_max, stats=(mean, std))
        observations[m] = obs
        actions[m] = raw
        log_probs[m] = neural.gaussian_stats(mean, std, raw)[0]
        obs, reward, _ = env.step(threads)
        rewards[m] = reward
        tuples.append(threads)
    return Trajectory(observations, actions, rewards, log_probs, tuples)


@dataclass
class TrainResult:
    policy: neural.PolicyParams
    value: neural.ValueParams
    state: TrainingState
    converged: bool
    seconds: float

    def history_csv(self) -> str:
        return history_to_csv(self.state.history)


def history_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for r in rows:
        w.writerow([r[0], *(repr(float(x)) for x in r[1:7]), r[7]])
    return buf.getvalue()


def read_history_csv(text: str) -> list[tuple]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != HISTORY_HEADER:
        raise ValueError("not a training history CSV")
    return [(int(r[0]), *(float(x) for x in r[1:7]), int(r[7])) for r in rows[1:] if r]


def train(env, profile: SystemProfile, cfg: TrainingConfig, *, progress_every: int = 0,
          on_episode=None) -> TrainResult:
    """Offline training against ``env`` until the stop rule fires or the
    episode budget runs out. The best-episode parameters are returned."""
    if profile.r_max <= 0:
        raise ConfigurationError("profile must carry a positive R_max")
    if hasattr(env, "attach_profile"):
        env.attach_profile(profile)
        r_max = 1.0
    else:
        r_max = profile.r_max
    rng = np.random.default_rng(cfg.seed)
    init_rng = np.random.default_rng([cfg.seed, 1])
    policy = neural.init_policy(init_rng, hidden=cfg.hidden)
    value = neural.init_value(init_rng, hidden=cfg.hidden)
    opt_p = neural.AdamState.zeros_like(policy)
    opt_v = neural.AdamState.zeros_like(value)
    state = TrainingState(r_max=r_max, steps_per_episode=cfg.steps_per_episode)
    best_policy, best_value = policy.copy(), value.copy()
    t0 = time.perf_counter()
    done = False

    while state.episode < cfg.max_episodes:
        traj = run_episode(env, policy, cfg.steps_per_episode, rng)
        traj.returns = discounted_returns(traj.rewards, cfg.gamma)
        for _ in range(cfg.update_epochs):
            parts, (gp, gv) = neural.compute_gradients(policy, value, traj, cfg)
            if not np.isfinite(parts.total):
                raise NonFiniteLossError(
                    f"non-finite loss at episode {state.episode}: {parts}",
                    snapshot={"episode": state.episode, "loss": parts._asdict(),
                              "rewards": traj.rewards.tolist(), "actions": traj.actions.tolist(),
                              "log_std": policy["log_std"].tolist()},
                )
            neural.adam_step(policy, gp, opt_p, cfg.lr)
            neural.adam_step(value, gv, opt_v, cfg.lr)

        ep_reward = traj.episode_reward
        if ep_reward > state.best_reward:
            state.best_reward = ep_reward
            state.stagnant = 0
            best_policy, best_value = policy.copy(), value.copy()
        else:
            state.stagnant += 1
        state.history.append((state.episode, ep_reward, ep_reward / cfg.steps_per_episode,
                              parts.actor, parts.critic, parts.entropy, state.best_reward, state.stagnant))
        if on_episode is not None:
            on_episode(state, traj)
        if progress_every and state.episode % progress_every == 0:
            log.info("episode %d mean step reward %.3f best %.3f stagnant %d",
                     state.episode, ep_reward / cfg.steps_per_episode, state.best_mean_step, state.stagnant)
        state.episode += 1
        if converged(state, cfg):
            done = True
            break

    return TrainResult(best_policy, best_value, state, done, time.perf_counter() - t0)


def config_dict(cfg: TrainingConfig) -> dict:
    return asdict(cfg)


def save_result(result: TrainResult, out_dir, *, k: float, n_max: int, profile: SystemProfile):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    neural.save_checkpoint(out / "checkpoint.json", result.policy, result.value, k=k, n_max=n_max,
                           profile=profile, meta={"episodes": result.state.episode,
                                                  "converged": result.converged,
                                                  "best_mean_step_reward": result.state.best_mean_step})
    (out / "history.csv").write_text(result.history_csv())
