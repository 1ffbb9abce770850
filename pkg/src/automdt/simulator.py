"""Event-driven model of chunks flowing disk -> sender buffer -> network ->
receiver buffer -> disk, one window (default one second) per call.

The inner loop is compiled with numba; ``Simulator.task`` calls the same
compiled kernel so single-task traces and whole windows share one code path.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numba
import numpy as np

from .domain import (
    DEFAULT_K,
    DEFAULT_N_MAX,
    ConcurrencyTuple,
    SystemProfile,
    ThroughputSample,
    UtilityConfig,
    make_observation,
    random_threads,
    total_utility,
)
from .errors import ConfigurationError

READ, NET, WRITE = 0, 1, 2
KINDS = {"read": READ, "network": NET, "net": NET, "write": WRITE}

# parameter vector layout
_P_TPT, _P_BUDGET, _P_SND_CAP, _P_RCV_CAP, _P_CHUNK, _P_EPS, _P_WINDOW = 0, 3, 6, 7, 8, 9, 10
_P_LEN = 11
# state vector layout
_S_SND, _S_RCV, _S_TO_READ, _S_ACC, _S_FIN = 0, 1, 2, 3, 6
_S_LEN = 9


_REQUIRED = ("tpt_read", "tpt_net", "tpt_write", "cap_read", "cap_net", "cap_write",
             "sender_capacity", "receiver_capacity")


@dataclass(frozen=True)
class ScenarioSpec:
    tpt_read: float
    tpt_net: float
    tpt_write: float
    cap_read: float
    cap_net: float
    cap_write: float
    sender_capacity: float
    receiver_capacity: float
    chunk: float | None = None
    retry_delta: float = 0.001
    window: float = 1.0
    n_max: int = DEFAULT_N_MAX
    k: float = DEFAULT_K
    seed: int = 0

    def __post_init__(self):
        if self.chunk is None:
            object.__setattr__(self, "chunk", min(self.sender_capacity, self.receiver_capacity) / 64.0)
        bad = []
        for name in ("tpt_read", "tpt_net", "tpt_write", "cap_read", "cap_net", "cap_write",
                     "sender_capacity", "receiver_capacity", "chunk", "retry_delta", "window"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v) or v <= 0:
                bad.append(f"{name}={v!r} (must be a finite number > 0)")
        if not bad and self.chunk > min(self.sender_capacity, self.receiver_capacity):
            bad.append(f"chunk={self.chunk!r} (must not exceed the smaller buffer)")
        if not isinstance(self.n_max, int) or isinstance(self.n_max, bool) or self.n_max < 1:
            bad.append(f"n_max={self.n_max!r} (must be an integer >= 1)")
        if not isinstance(self.k, (int, float)) or not self.k > 1:
            bad.append(f"k={self.k!r} (must be > 1)")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            bad.append(f"seed={self.seed!r} (must be an integer)")
        if bad:
            raise ConfigurationError("invalid scenario: " + "; ".join(bad))

    @property
    def tpt(self):
        return (self.tpt_read, self.tpt_net, self.tpt_write)

    @property
    def caps(self):
        return (self.cap_read, self.cap_net, self.cap_write)

    def replace(self, **changes) -> "ScenarioSpec":
        d = asdict(self)
        d.update(changes)
        return ScenarioSpec(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown scenario field(s): {', '.join(unknown)}")
        required = [name for name in _REQUIRED if name not in d]
        if required:
            raise ConfigurationError(f"missing scenario field(s): {', '.join(required)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigurationError(f"{path}: scenario must be a JSON object")
        return cls.from_dict(d)


@dataclass
class StepOutcome:
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


# ---------------------------------------------------------------- kernel


@numba.njit(cache=True)
def _task(S, P, t, kind):
    chunk = P[_P_CHUNK]
    tol = 1e-9 * chunk
    snd = S[_S_SND]
    rcv = S[_S_RCV]
    amt = 0.0
    if kind == READ:
        amt = min(chunk, S[_S_TO_READ])
        if amt <= tol or P[_P_SND_CAP] - snd < amt - tol:
            amt = 0.0
    elif kind == NET:
        if snd >= chunk - tol:
            amt = min(chunk, snd)
        elif S[_S_TO_READ] <= tol and snd > tol:
            amt = snd
        if amt > 0.0 and P[_P_RCV_CAP] - rcv < amt - tol:
            amt = 0.0
    elif kind == WRITE:
        if rcv >= chunk - tol:
            amt = min(chunk, rcv)
        elif S[_S_TO_READ] <= tol and snd <= tol and rcv > tol:
            amt = rcv
    else:
        raise ValueError("unknown task kind")
    if amt > 0.0 and S[_S_ACC + kind] + amt > P[_P_BUDGET + kind] + tol:
        amt = 0.0
    if amt == 0.0:
        return t + P[_P_EPS]

    if kind == READ:
        S[_S_SND] = snd + amt
        S[_S_TO_READ] -= amt
    elif kind == NET:
        S[_S_SND] = snd - amt
        S[_S_RCV] = rcv + amt
    else:
        S[_S_RCV] = rcv - amt
    S[_S_ACC + kind] += amt
    if (S[_S_SND] < -tol or S[_S_SND] > P[_P_SND_CAP] + tol
            or S[_S_RCV] < -tol or S[_S_RCV] > P[_P_RCV_CAP] + tol):
        raise AssertionError("buffer bound violated")
    d = amt / P[_P_TPT + kind]
    if t + d > S[_S_FIN + kind]:
        S[_S_FIN + kind] = t + d
    return t + d + P[_P_EPS]


@numba.njit(cache=True)
def _never_again(S, P, kind):
    # true when a task of this kind cannot transfer again before the window closes
    tol = 1e-9 * P[_P_CHUNK]
    if P[_P_BUDGET + kind] - S[_S_ACC + kind] <= tol:
        return True
    src_done = S[_S_TO_READ] <= tol
    if kind == READ:
        return src_done
    if kind == NET:
        return src_done and S[_S_SND] <= tol
    return src_done and S[_S_SND] <= tol and S[_S_RCV] <= tol


@numba.njit(cache=True)
def _heap_less(ht, hs, i, j):
    return ht[i] < ht[j] or (ht[i] == ht[j] and hs[i] < hs[j])


@numba.njit(cache=True)
def _heap_swap(ht, hs, i, j):
    ht[i], ht[j] = ht[j], ht[i]
    hs[i], hs[j] = hs[j], hs[i]


@numba.njit(cache=True)
def _heap_push(ht, hs, size, t, s):
    i = size
    ht[i] = t
    hs[i] = s
    while i > 0:
        parent = (i - 1) // 2
        if _heap_less(ht, hs, i, parent):
            _heap_swap(ht, hs, i, parent)
            i = parent
        else:
            break
    return size + 1


@numba.njit(cache=True)
def _heap_pop(ht, hs, size):
    t, s = ht[0], hs[0]
    size -= 1
    if size > 0:
        ht[0], hs[0] = ht[size], hs[size]
        i = 0
        while True:
            left = 2 * i + 1
            if left >= size:
                break
            child = left
            if left + 1 < size and _heap_less(ht, hs, left + 1, left):
                child = left + 1
            if _heap_less(ht, hs, child, i):
                _heap_swap(ht, hs, child, i)
                i = child
            else:
                break
    return t, s, size


@numba.njit(cache=True)
def _run_window(S, P, n_r, n_n, n_w, naive):
    """Drain one window of tasks; returns the number of task executions.

    Ties in time are broken by task id (stage, then thread index), which
    does not depend on history. With ``naive`` every blocked task re-polls
    each retry_delta. Otherwise a blocked task is parked and only re-queued,
    at the next point of its own retry chain that the naive loop would run
    after the current event, once a transfer that could unblock it happens.
    """
    for i in range(3):
        S[_S_ACC + i] = 0.0
        S[_S_FIN + i] = 0.0
    total = n_r + n_n + n_w
    cap = max(total, 1)
    ht = np.empty(cap)
    hs = np.empty(cap, dtype=np.int64)
    parked_t = np.empty((3, cap))
    parked_s = np.empty((3, cap), dtype=np.int64)
    n_parked = np.zeros(3, dtype=np.int64)
    size = 0
    counts = (n_r, n_n, n_w)
    for kind in range(3):
        for j in range(counts[kind]):
            size = _heap_push(ht, hs, size, 0.0, kind * cap + j)
    end = P[_P_WINDOW]
    eps = P[_P_EPS]
    events = 0
    while size > 0:
        t, task_id, size = _heap_pop(ht, hs, size)
        kind = task_id // cap
        events += 1
        before = S[_S_ACC + kind]
        t_next = _task(S, P, t, kind)
        moved = S[_S_ACC + kind] != before
        if moved or naive:
            if t_next < end and not _never_again(S, P, kind):
                size = _heap_push(ht, hs, size, t_next, task_id)
        elif not _never_again(S, P, kind):
            parked_t[kind, n_parked[kind]] = t
            parked_s[kind, n_parked[kind]] = task_id
            n_parked[kind] += 1
        if moved and not naive:
            for other in range(3):
                # read <-> network share the sender buffer, network <-> write the receiver
                if other == kind or (kind == READ and other == WRITE) or (kind == WRITE and other == READ):
                    continue
                if n_parked[other] == 0 or _never_again(S, P, other):
                    n_parked[other] = 0
                    continue
                for j in range(n_parked[other]):
                    r = parked_t[other, j] + eps
                    # retries ordered before this event saw the old state and stayed blocked
                    while (r < t or (r == t and other < kind)) and r < end:
                        r = r + eps
                    if r < end:
                        size = _heap_push(ht, hs, size, r, parked_s[other, j])
                n_parked[other] = 0
    return events


# ---------------------------------------------------------------- wrapper


class Simulator:
    """One simulated transfer path; implements the Environment interface."""

    def __init__(self, spec: ScenarioSpec, profile: SystemProfile | None = None, dataset=None,
                 naive: bool = False):
        if not isinstance(spec, ScenarioSpec):
            raise ConfigurationError("Simulator needs a ScenarioSpec")
        self.spec = spec
        self.naive = naive
        self.n_max = spec.n_max
        self.utility_cfg = UtilityConfig(spec.k)
        self.profile = profile
        self.rng = np.random.default_rng(spec.seed)
        self._P = np.empty(_P_LEN)
        self._P[_P_TPT:_P_TPT + 3] = spec.tpt
        self._P[_P_SND_CAP] = spec.sender_capacity
        self._P[_P_RCV_CAP] = spec.receiver_capacity
        self._P[_P_CHUNK] = spec.chunk
        self._P[_P_EPS] = spec.retry_delta
        self._set_window(spec.window)
        self._S = np.zeros(_S_LEN)
        self._S[_S_TO_READ] = np.inf if dataset is None else float(dataset)
        self.dataset = dataset
        self.totals = [0.0, 0.0, 0.0]
        self.elapsed = 0.0
        self.last: StepOutcome | None = None

    def _set_window(self, window):
        self.window = float(window)
        self._P[_P_WINDOW] = self.window
        self._P[_P_BUDGET:_P_BUDGET + 3] = np.asarray(self.spec.caps) * self.window

    @property
    def sender_used(self) -> float:
        return float(self._S[_S_SND])

    @property
    def receiver_used(self) -> float:
        return float(self._S[_S_RCV])

    @property
    def stage_bytes(self):
        return tuple(float(x) for x in self._S[_S_ACC:_S_ACC + 3])

    def attach_profile(self, profile: SystemProfile | None):
        self.profile = profile

    @property
    def throughput_scale(self) -> float:
        if self.profile is not None and self.profile.bottleneck > 0:
            return self.profile.bottleneck
        return self.spec.cap_net

    def task(self, t: float, kind) -> float:
        """Run a single task at time ``t``; returns the time it may run again."""
        if isinstance(kind, str):
            if kind not in KINDS:
                raise ValueError(f"unknown task kind {kind!r}")
            kind = KINDS[kind]
        if kind not in (READ, NET, WRITE):
            raise ValueError(f"unknown task kind {kind!r}")
        return float(_task(self._S, self._P, float(t), int(kind)))

    def clear_buffers(self):
        self._S[_S_SND] = 0.0
        self._S[_S_RCV] = 0.0

    def get_utility(self, threads) -> StepOutcome:
        threads = ConcurrencyTuple(*(int(n) for n in threads))
        if any(n < 0 or n > self.n_max for n in threads):
            raise ValueError(f"thread counts must lie in [0, {self.n_max}], got {tuple(threads)}")
        events = _run_window(self._S, self._P, threads[0], threads[1], threads[2], self.naive)
        acc = self.stage_bytes
        for i in range(3):
            self.totals[i] += acc[i]
        self.elapsed += self.window
        sample = ThroughputSample(*(a / self.window for a in acc))
        utility = total_utility(sample, threads, self.utility_cfg)
        reward = utility / self.profile.r_max if self.profile is not None and self.profile.r_max > 0 else utility
        obs = make_observation(
            threads, sample,
            1.0 - self.sender_used / self.spec.sender_capacity,
            1.0 - self.receiver_used / self.spec.receiver_capacity,
            self.n_max, self.throughput_scale,
        )
        self.last = StepOutcome(
            threads=threads, sample=sample, reward=reward, utility=utility, observation=obs,
            stage_bytes=acc, finish_times=tuple(float(x) for x in self._S[_S_FIN:_S_FIN + 3]),
            sender_used=self.sender_used, receiver_used=self.receiver_used, events=int(events),
        )
        return self.last

    def reset_episode(self, rng: np.random.Generator | None = None, dataset=None,
                      threads=None) -> np.ndarray:
        """Empty buffers, apply one warm-up window (random tuple unless ``threads`` is given)."""
        rng = self.rng if rng is None else rng
        self.clear_buffers()
        self.totals = [0.0, 0.0, 0.0]
        self.elapsed = 0.0
        if dataset is not None:
            self.dataset = dataset
        self._S[_S_TO_READ] = np.inf if self.dataset is None else float(self.dataset)
        if threads is None:
            threads = random_threads(rng, self.n_max)
        return self.get_utility(threads).observation

    # Environment interface
    def reset(self, rng: np.random.Generator | None = None, dataset=None, threads=None) -> np.ndarray:
        return self.reset_episode(rng, dataset, threads)

    def step(self, threads):
        out = self.get_utility(threads)
        return out.observation, out.reward, out.sample

    def remaining_bytes(self) -> float:
        if self.dataset is None:
            return math.inf
        left = float(self.dataset) - self.totals[WRITE]
        return left if left > 1e-9 * self.spec.chunk else 0.0
