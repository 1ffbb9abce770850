"""Core types, the utility function and exploration-phase profiling."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, InsufficientExplorationError

STAGES = ("read", "net", "write")
OBS_DIM = 8
ACTION_DIM = 3
DEFAULT_K = 1.02
DEFAULT_N_MAX = 30


class ConcurrencyTuple(NamedTuple):
    n_r: int
    n_n: int
    n_w: int

    def clamped(self, lo: int, hi: int) -> "ConcurrencyTuple":
        return ConcurrencyTuple(*(min(max(int(n), lo), hi) for n in self))


class ThroughputSample(NamedTuple):
    t_r: float
    t_n: float
    t_w: float


@dataclass(frozen=True)
class UtilityConfig:
    k: float = DEFAULT_K

    def __post_init__(self):
        if not (self.k > 1.0) or not math.isfinite(self.k):
            raise ConfigurationError(f"utility base k must be > 1, got {self.k!r}")


def total_utility(sample: Sequence[float], threads: Sequence[int], cfg: UtilityConfig) -> float:
    """Sum of per-stage utilities ``t_i / k**n_i``."""
    if not cfg.k > 1.0:
        raise ConfigurationError(f"utility base k must be > 1, got {cfg.k!r}")
    return sum(float(t) / cfg.k ** int(n) for t, n in zip(sample, threads))


def stage_utility(throughput: float, n: int, k: float) -> float:
    return float(throughput) / k ** int(n)


@dataclass(frozen=True)
class ExplorationRecord:
    ts: float
    threads: ConcurrencyTuple
    sample: ThroughputSample


CSV_HEADER = ("ts", "n_r", "n_n", "n_w", "t_r", "t_n", "t_w")


@dataclass
class ExplorationLog:
    records: list[ExplorationRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, ts, threads, sample):
        if self.records and not ts > self.records[-1].ts:
            raise ValueError(f"timestamps must increase strictly ({ts} after {self.records[-1].ts})")
        self.records.append(
            ExplorationRecord(float(ts), ConcurrencyTuple(*map(int, threads)), ThroughputSample(*map(float, sample)))
        )

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([repr(r.ts), *r.threads, *(repr(x) for x in r.sample)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def read_csv(cls, path) -> "ExplorationLog":
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text: str) -> "ExplorationLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise ValueError(f"exploration CSV must start with header {','.join(CSV_HEADER)}")
        log = cls()
        for row in rows[1:]:
            if not row:
                continue
            log.append(float(row[0]), [int(v) for v in row[1:4]], [float(v) for v in row[4:7]])
        return log


@dataclass(frozen=True)
class SystemProfile:
    """What the random-threads run taught us about a transfer path.

    ``bandwidths`` and ``per_thread`` are the max observed stage rate and
    max observed per-thread rate, ordered read, network, write.
    """

    bandwidths: tuple[float, float, float]
    per_thread: tuple[float, float, float]
    bottleneck: float
    optimal: ConcurrencyTuple
    r_max: float
    k: float = DEFAULT_K

    def to_dict(self) -> dict:
        return {
            "bandwidths": list(self.bandwidths),
            "per_thread": list(self.per_thread),
            "bottleneck": self.bottleneck,
            "optimal": list(self.optimal),
            "r_max": self.r_max,
            "k": self.k,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemProfile":
        return cls(
            bandwidths=tuple(float(x) for x in d["bandwidths"]),
            per_thread=tuple(float(x) for x in d["per_thread"]),
            bottleneck=float(d["bottleneck"]),
            optimal=ConcurrencyTuple(*(int(x) for x in d["optimal"])),
            r_max=float(d["r_max"]),
            k=float(d.get("k", DEFAULT_K)),
        )


def optimal_threads(bottleneck: float, per_thread: float) -> int:
    # ceiling so that n * TPT reaches the bottleneck rate; at least one thread
    if bottleneck <= 0:
        return 1
    ratio = bottleneck / per_thread
    n = math.ceil(ratio)
    # guard against 12.000000000000002 style float noise
    if n - ratio > 1.0 - 1e-9:
        n -= 1
    return max(1, n)


def theoretical_max_reward(profile: SystemProfile, cfg: UtilityConfig | None = None) -> float:
    k = cfg.k if cfg is not None else profile.k
    return profile.bottleneck * sum(k ** (-int(n)) for n in profile.optimal)


def derive_profile(log: ExplorationLog | Sequence[ExplorationRecord], cfg: UtilityConfig) -> SystemProfile:
    records = list(log)
    if not records:
        raise InsufficientExplorationError("exploration log is empty")
    bw = [0.0, 0.0, 0.0]
    tpt = [0.0, 0.0, 0.0]
    seen = [False, False, False]
    for rec in records:
        for i in range(3):
            t = rec.sample[i]
            bw[i] = max(bw[i], t)
            n = rec.threads[i]
            if n >= 1:
                seen[i] = True
                tpt[i] = max(tpt[i], t / n)
    missing = [STAGES[i] for i in range(3) if not seen[i]]
    if missing:
        raise InsufficientExplorationError(f"no record with >= 1 thread for stage(s): {', '.join(missing)}")
    zero = [STAGES[i] for i in range(3) if tpt[i] <= 0]
    if zero:
        raise InsufficientExplorationError(f"stage(s) never moved data: {', '.join(zero)}")
    b = min(bw)
    optimal = ConcurrencyTuple(*(optimal_threads(b, tpt[i]) for i in range(3)))
    partial = SystemProfile(tuple(bw), tuple(tpt), b, optimal, 0.0, cfg.k)
    return SystemProfile(tuple(bw), tuple(tpt), b, optimal, theoretical_max_reward(partial, cfg), cfg.k)


def make_observation(threads, sample, sender_free, receiver_free, n_max, throughput_scale) -> np.ndarray:
    """8-vector: threads/n_max, throughputs/scale, free buffer fractions."""
    obs = np.empty(OBS_DIM)
    obs[0:3] = np.asarray(threads, dtype=float) / n_max
    obs[3:6] = np.asarray(sample, dtype=float) / throughput_scale
    obs[6] = min(max(sender_free, 0.0), 1.0)
    obs[7] = min(max(receiver_free, 0.0), 1.0)
    return obs


class Environment(Protocol):
    """What the trainer, controller and baseline need from a transfer path."""

    n_max: int

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray: ...

    def step(self, threads: ConcurrencyTuple) -> tuple[np.ndarray, float, ThroughputSample]: ...

    def remaining_bytes(self) -> float: ...


def random_threads(rng: np.random.Generator, n_max: int) -> ConcurrencyTuple:
    return ConcurrencyTuple(*(int(x) for x in rng.integers(1, n_max + 1, size=3)))


def explore(env: Environment, probes: int, n_max: int, rng: np.random.Generator, window: float = 1.0) -> ExplorationLog:
    """Random-threads run: one uniformly drawn tuple per probe window."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    log = ExplorationLog()
    for i in range(probes):
        threads = random_threads(rng, n_max)
        _, _, sample = env.step(threads)
        log.append((i + 1) * window, threads, sample)
    return log
