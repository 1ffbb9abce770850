import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from automdt.domain import ExplorationLog  # noqa: E402
from automdt.simulator import ScenarioSpec  # noqa: E402


def synthetic_log(tpt, caps, n_max=30, probes=600, seed=0) -> ExplorationLog:
    """Exploration log under ideal linear scaling: T_i = min(n_i * tpt_i, cap_i)."""
    rng = np.random.default_rng(seed)
    log = ExplorationLog()
    for i in range(probes):
        n = rng.integers(1, n_max + 1, size=3)
        log.append(i + 1.0, n, [min(n[j] * tpt[j], caps[j]) for j in range(3)])
    return log


def small_spec(**kw) -> ScenarioSpec:
    base = dict(tpt_read=10.0, tpt_net=10.0, tpt_write=10.0, cap_read=1e6, cap_net=1e6, cap_write=1e6,
                sender_capacity=100.0, receiver_capacity=100.0, chunk=1.0, retry_delta=0.001, window=1.0)
    base.update(kw)
    return ScenarioSpec(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def gradcheck_case(seed: int, hidden: int = 256):
    """Networks, a frozen old policy and a 10-step batch whose probability
    ratios spread on both sides of the clip range."""
    from automdt import neural
    from automdt.ppo import Trajectory

    rng = np.random.default_rng(seed)
    policy = neural.init_policy(rng, hidden=hidden)
    value = neural.init_value(rng, hidden=hidden)
    policy["log_std"] = rng.uniform(-1.0, 0.5, 3)
    policy["mean.b"] = rng.normal(0.0, 2.0, 3)
    value["head.W"] += rng.normal(0.0, 0.05, value["head.W"].shape)
    old = policy.copy()
    old["mean.W"] += rng.normal(0.0, 0.02, old["mean.W"].shape)
    old["log_std"] += rng.normal(0.0, 0.1, 3)
    obs = rng.uniform(0.0, 1.0, (10, 8))
    mean_old, std_old = neural.policy_forward(old, obs)
    actions = mean_old + std_old * rng.standard_normal((10, 3))
    log_probs = neural.gaussian_stats(mean_old, std_old, actions)[0]
    batch = Trajectory(obs, actions, rng.uniform(0.0, 10.0, 10), log_probs)
    batch.returns = batch.rewards.copy()
    return policy, value, batch, rng


# ------------------------------------------------------------ acceptance report

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number, reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = getattr(item, "criterion_detail", "")
        _CRITERIA.setdefault(mark.args[0], []).append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        runs = _CRITERIA[n]
        ok = all(passed for _, passed, _ in runs)
        details = "; ".join(d for _, _, d in runs if d)
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {details}")
