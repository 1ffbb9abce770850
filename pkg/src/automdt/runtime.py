"""Production phase: turn policy outputs into thread counts and drive an
environment until a finite dataset has been delivered.

``PipelineEnv`` is a live stand-in for a DTN pair: three pools of worker
threads move chunks through two bounded in-memory staging queues.
"""

from __future__ import annotations

import csv
import io
import json
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import (
    ConcurrencyTuple,
    SystemProfile,
    ThroughputSample,
    UtilityConfig,
    make_observation,
    random_threads,
    total_utility,
)
from .errors import PipelineError, TransferStallError


def round_half_away(x):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_tuple(raw, n_max: int) -> ConcurrencyTuple:
    r = np.clip(round_half_away(raw), 1, n_max)
    return ConcurrencyTuple(*(int(v) for v in r))


def act(policy, obs, rng, n_max: int, deterministic: bool = False, stats=None):
    """Sample (or take the mean of) the action distribution and map it to a tuple.

    Returns the raw continuous action, kept for exact log-prob ratios, and
    the rounded, clamped concurrency tuple.
    """
    from .neural import policy_forward

    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    mean, std = stats if stats is not None else policy_forward(policy, obs)
    if deterministic:
        raw = np.array(mean, dtype=float)
    else:
        raw = mean + std * rng.standard_normal(len(mean))
    return raw, to_tuple(raw, n_max)


# ------------------------------------------------------------ reports

REPORT_HEADER = ("ts", "n_r", "n_n", "n_w", "t_r", "t_n", "t_w", "reward", "snd_used", "rcv_used")


@dataclass
class TransferReport:
    rows: list = field(default_factory=list)
    total_bytes: float = 0.0
    completion_s: float = 0.0
    targets: ConcurrencyTuple | None = None
    bottleneck: float | None = None
    controller: str = "agent"

    @property
    def steps(self) -> int:
        return len(self.rows)

    def record(self, ts, threads, sample, reward, snd, rcv):
        if self.rows and not ts > self.rows[-1][0]:
            raise ValueError("report timestamps must increase")
        self.rows.append((float(ts), *map(int, threads), *map(float, sample), float(reward), float(snd), float(rcv)))

    def threads(self, stage: int) -> list[int]:
        return [r[1 + stage] for r in self.rows]

    def first_reach(self) -> dict:
        """Step index (1-based) at which each stage first reached its target count."""
        out = {}
        for i, name in enumerate(("read", "net", "write")):
            hit = None
            if self.targets is not None:
                for step, r in enumerate(self.rows, start=1):
                    if r[1 + i] >= self.targets[i]:
                        hit = step
                        break
            out[name] = hit
        return out

    def steps_to_fraction(self, fraction: float = 0.9) -> int | None:
        """First step whose delivered (write) rate reaches ``fraction`` of the bottleneck."""
        if not self.bottleneck:
            return None
        for step, r in enumerate(self.rows, start=1):
            if r[6] >= fraction * self.bottleneck:
                return step
        return None

    def mean_concurrency(self) -> tuple[float, float, float]:
        if not self.rows:
            return (0.0, 0.0, 0.0)
        a = np.array([r[1:4] for r in self.rows], dtype=float)
        return tuple(float(x) for x in a.mean(axis=0))

    def summary(self) -> dict:
        return {
            "controller": self.controller,
            "total_bytes": self.total_bytes,
            "completion_s": self.completion_s,
            "steps": self.steps,
            "first_reach": self.first_reach(),
            "targets": list(self.targets) if self.targets is not None else None,
            "bottleneck": self.bottleneck,
            "steps_to_90pct": self.steps_to_fraction(0.9),
            "mean_concurrency": list(self.mean_concurrency()),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([repr(r[0]), *r[1:4], *(repr(x) for x in r[4:])])
        return buf.getvalue()

    def save(self, out_dir, stem: str = "report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2) + "\n")

    @classmethod
    def parse(cls, csv_text: str, summary: dict | None = None) -> "TransferReport":
        rows = list(csv.reader(io.StringIO(csv_text)))
        if not rows or tuple(rows[0]) != REPORT_HEADER:
            raise ValueError("not a transfer report CSV")
        rep = cls()
        for r in rows[1:]:
            if r:
                rep.rows.append((float(r[0]), int(r[1]), int(r[2]), int(r[3]), *(float(x) for x in r[4:])))
        if summary:
            rep.total_bytes = float(summary.get("total_bytes", 0.0))
            rep.completion_s = float(summary.get("completion_s", 0.0))
            rep.targets = ConcurrencyTuple(*summary["targets"]) if summary.get("targets") else None
            rep.bottleneck = summary.get("bottleneck")
            rep.controller = summary.get("controller", "agent")
        return rep

    @classmethod
    def load(cls, json_path) -> "TransferReport":
        json_path = Path(json_path)
        summary = json.loads(json_path.read_text())
        return cls.parse(json_path.with_suffix(".csv").read_text(), summary)


# ------------------------------------------------------------ control loop


def _last_finish(env) -> float:
    last = getattr(env, "last", None)
    if last is None:
        return env.window
    fin = last.finish_times[2]
    return fin if fin > 0 else env.window


def drive(env, controller, dataset_bytes: float, rng, *, stall_limit: int = 30, max_steps: int = 100_000,
          profile: SystemProfile | None = None, label: str = "agent", start=None) -> TransferReport:
    """Shared loop for the agent and the baseline.

    ``controller(obs, outcome)`` returns the next concurrency tuple; ``outcome``
    is the previous window's StepOutcome (the warm-up window on the first call).
    The warm-up window uses ``start`` if given, otherwise a random tuple.
    """
    report = TransferReport(controller=label)
    if profile is not None:
        report.targets = profile.optimal
        report.bottleneck = profile.bottleneck
    if dataset_bytes <= 0:
        return report
    obs = env.reset(rng, dataset=dataset_bytes, threads=start)
    window = env.window
    zero_run = 0
    prev_remaining = env.remaining_bytes()
    t = 0.0

    def _log(outcome):
        nonlocal t
        t += window
        report.record(t, outcome.threads, outcome.sample, outcome.reward,
                      outcome.sender_used, outcome.receiver_used)

    _log(env.last)
    while env.remaining_bytes() > 0:
        if report.steps >= max_steps:
            raise TransferStallError(f"transfer did not finish within {max_steps} steps", report)
        threads = controller(obs, env.last)
        obs, _, _ = env.step(threads)
        _log(env.last)
        remaining = env.remaining_bytes()
        zero_run = zero_run + 1 if remaining >= prev_remaining else 0
        prev_remaining = remaining
        if zero_run >= stall_limit:
            report.total_bytes = dataset_bytes - remaining
            raise TransferStallError(f"no progress for {zero_run} consecutive windows", report)
    report.total_bytes = float(dataset_bytes)
    report.completion_s = (report.steps - 1) * window + _last_finish(env)
    return report


def run_transfer(env, checkpoint, dataset_bytes: float, step_window: float | None = None, *,
                 rng=None, deterministic: bool = False, stall_limit: int = 30,
                 max_steps: int = 100_000, start=None) -> TransferReport:
    """Move ``dataset_bytes`` through ``env`` under the trained policy.

    Every window the policy reassigns all three thread counts; there is no
    episode limit, the loop ends when the environment reports nothing left.
    The first window runs ``start`` if given, otherwise a random tuple.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if step_window is not None and hasattr(env, "_set_window"):
        env._set_window(step_window)
    elif step_window is not None:
        env.window = step_window
    if checkpoint.profile is not None and hasattr(env, "attach_profile"):
        env.attach_profile(checkpoint.profile)
    policy = checkpoint.policy
    n_max = min(env.n_max, checkpoint.n_max)

    def controller(obs, _outcome):
        return act(policy, obs, rng, n_max, deterministic=deterministic)[1]

    return drive(env, controller, dataset_bytes, rng, stall_limit=stall_limit, max_steps=max_steps,
                 profile=checkpoint.profile, label="agent", start=start)


# ------------------------------------------------------------ live pipeline


@dataclass
class PipelineOutcome:
    threads: ConcurrencyTuple
    sample: ThroughputSample
    reward: float
    utility: float
    observation: np.ndarray
    stage_bytes: tuple[float, float, float]
    finish_times: tuple[float, float, float]
    sender_used: float
    receiver_used: float
    events: int = 0


class PipelineEnv:
    """Live staged pipeline: read -> sender queue -> network -> receiver queue -> write.

    Workers are real threads pacing themselves to the scenario's per-thread
    rate; stage caps are per-window byte budgets, as in the simulator. One
    lock guards both queues and all counters, so every chunk move and its
    accounting happen atomically.
    """

    def __init__(self, spec, profile: SystemProfile | None = None, dataset=None, window: float | None = None,
                 poll: float | None = None):
        self.spec = spec
        self.n_max = spec.n_max
        self.window = float(window if window is not None else spec.window)
        self.poll = poll if poll is not None else spec.retry_delta
        self.profile = profile
        self.utility_cfg = UtilityConfig(spec.k)
        self.rng = np.random.default_rng(spec.seed)
        self.chunk = float(spec.chunk)
        self._cv = threading.Condition()
        self._sender: deque = deque()
        self._receiver: deque = deque()
        self._snd_used = 0.0
        self._rcv_used = 0.0
        self._acc = [0.0, 0.0, 0.0]
        self._fin = [0.0, 0.0, 0.0]
        self._active = [0, 0, 0]
        self._open = False
        self._window_start = 0.0
        self._stop = False
        self._workers: list[list[threading.Thread]] = [[], [], []]
        self.dataset = dataset
        self._to_read = math.inf if dataset is None else float(dataset)
        self.totals = [0.0, 0.0, 0.0]
        self.last = None

    # -- worker side

    def _try_move(self, kind: int) -> float:
        """Attempt one chunk move under the lock; returns moved amount (0 if blocked)."""
        c = self.chunk
        tol = 1e-9 * c
        budget = self.spec.caps[kind] * self.window
        amt = 0.0
        if kind == 0:
            amt = min(c, self._to_read)
            if amt <= tol or self.spec.sender_capacity - self._snd_used < amt - tol:
                amt = 0.0
        elif kind == 1:
            if self._sender and self.spec.receiver_capacity - self._rcv_used >= self._sender[0] - tol:
                if self._sender[0] >= c - tol or self._to_read <= tol:
                    amt = self._sender[0]
        else:
            if self._receiver and (self._receiver[0] >= c - tol or (self._to_read <= tol and not self._sender)):
                amt = self._receiver[0]
        if amt <= 0.0 or self._acc[kind] + amt > budget + tol:
            return 0.0
        if kind == 0:
            self._sender.append(amt)
            self._snd_used += amt
            self._to_read -= amt
        elif kind == 1:
            self._sender.popleft()
            self._snd_used -= amt
            self._receiver.append(amt)
            self._rcv_used += amt
        else:
            self._receiver.popleft()
            self._rcv_used -= amt
        self._acc[kind] += amt
        self._cv.notify_all()
        return amt

    def _worker(self, kind: int, index: int):
        rate = self.spec.tpt[kind]
        while True:
            with self._cv:
                while not self._stop and not (self._open and index < self._active[kind]):
                    self._cv.wait()
                if self._stop:
                    return
                amt = self._try_move(kind)
                if amt == 0.0:
                    self._cv.wait(self.poll)
                    continue
                started = time.monotonic()
            # pace to the per-thread rate outside the lock
            busy = amt / rate
            time.sleep(busy)
            with self._cv:
                end = started + busy - self._window_start
                if end > self._fin[kind]:
                    self._fin[kind] = end

    def _ensure_workers(self, threads):
        for kind, n in enumerate(threads):
            pool = self._workers[kind]
            while len(pool) < n:
                t = threading.Thread(target=self._worker, args=(kind, len(pool)), daemon=True,
                                     name=f"automdt-{('read', 'net', 'write')[kind]}-{len(pool)}")
                try:
                    t.start()
                except RuntimeError as exc:
                    raise PipelineError(f"could not start worker: {exc}") from exc
                pool.append(t)

    # -- environment interface

    def attach_profile(self, profile):
        self.profile = profile

    def _set_window(self, window):
        self.window = float(window)

    @property
    def sender_used(self):
        return self._snd_used

    @property
    def receiver_used(self):
        return self._rcv_used

    def step_window(self, threads) -> PipelineOutcome:
        threads = ConcurrencyTuple(*(int(n) for n in threads))
        if any(n < 0 or n > self.n_max for n in threads):
            raise ValueError(f"thread counts must lie in [0, {self.n_max}], got {tuple(threads)}")
        self._ensure_workers(threads)
        with self._cv:
            self._acc = [0.0, 0.0, 0.0]
            self._fin = [0.0, 0.0, 0.0]
            self._active = list(threads)
            self._window_start = time.monotonic()
            self._open = True
            self._cv.notify_all()
        time.sleep(self.window)
        with self._cv:
            self._open = False
            acc = tuple(self._acc)
            fin = tuple(min(f, self.window) for f in self._fin)
            snd, rcv = self._snd_used, self._rcv_used
        for i in range(3):
            self.totals[i] += acc[i]
        sample = ThroughputSample(*(a / self.window for a in acc))
        utility = total_utility(sample, threads, self.utility_cfg)
        reward = utility / self.profile.r_max if self.profile is not None and self.profile.r_max > 0 else utility
        scale = self.profile.bottleneck if self.profile is not None and self.profile.bottleneck > 0 else self.spec.cap_net
        obs = make_observation(threads, sample, 1.0 - snd / self.spec.sender_capacity,
                               1.0 - rcv / self.spec.receiver_capacity, self.n_max, scale)
        self.last = PipelineOutcome(threads, sample, reward, utility, obs, acc, fin, snd, rcv)
        return self.last

    def reset(self, rng=None, dataset=None, threads=None):
        rng = self.rng if rng is None else rng
        with self._cv:
            self._sender.clear()
            self._receiver.clear()
            self._snd_used = self._rcv_used = 0.0
            if dataset is not None:
                self.dataset = dataset
            self._to_read = math.inf if self.dataset is None else float(self.dataset)
        self.totals = [0.0, 0.0, 0.0]
        if threads is None:
            threads = random_threads(rng, self.n_max)
        return self.step_window(threads).observation

    def step(self, threads):
        out = self.step_window(threads)
        return out.observation, out.reward, out.sample

    def remaining_bytes(self) -> float:
        if self.dataset is None:
            return math.inf
        left = float(self.dataset) - self.totals[2]
        return left if left > 1e-9 * self.chunk else 0.0

    def close(self):
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        for pool in self._workers:
            for t in pool:
                t.join(timeout=5)
        self._workers = [[], [], []]

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def pipeline_step(env: PipelineEnv, threads) -> PipelineOutcome:
    return env.step_window(threads)
