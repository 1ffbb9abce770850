import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from automdt import neural
from automdt.domain import UtilityConfig, derive_profile, explore
from automdt.errors import TransferStallError
from automdt.runtime import PipelineEnv, TransferReport, act, round_half_away, run_transfer, to_tuple
from automdt.scenarios import MB_PER_GB, TARGETS, load_fixture
from automdt.simulator import Simulator

from conftest import small_spec


def fixed_checkpoint(target, profile=None, n_max=30, log_std=0.0):
    """A policy whose mean ignores the observation and sits on ``target``."""
    rng = np.random.default_rng(0)
    policy = neural.init_policy(rng, hidden=8)
    policy["mean.W"][:] = 0.0
    policy["mean.b"] = np.asarray(target, dtype=float)
    policy["log_std"] = np.full(3, log_std)
    return neural.Checkpoint(policy, neural.init_value(rng, hidden=8), 1.02, n_max, profile)


def fixture_profile(name):
    spec = load_fixture(name)
    sim = Simulator(spec)
    rng = np.random.default_rng(0)
    sim.reset(rng)
    return sim, derive_profile(explore(sim, 600, spec.n_max, rng), UtilityConfig(spec.k))


class TestAct:
    def test_rounds_half_away_from_zero(self):
        assert list(round_half_away([0.5, 1.5, 2.5, -0.5, -1.5, 2.49])) == [1, 2, 3, -1, -2, 2]

    def test_examples(self):
        assert to_tuple([12.6, 6.4, 4.2], 30) == (13, 6, 4)
        assert to_tuple([-3.2, 50.7, 5.5], 30) == (1, 30, 6)

    def test_deterministic_uses_mean(self):
        ck = fixed_checkpoint((12.6, 6.4, 4.2))
        raw, tup = act(ck.policy, np.zeros(8), None, 30, deterministic=True)
        np.testing.assert_array_equal(raw, [12.6, 6.4, 4.2])
        assert tup == (13, 6, 4)

    def test_vanishing_std_collapses_to_mean(self):
        ck = fixed_checkpoint((7.2, 3.0, 19.9), log_std=-20.0)
        rng = np.random.default_rng(1)
        assert {act(ck.policy, np.zeros(8), rng, 30)[1] for _ in range(50)} == {(7, 3, 20)}

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), st.integers(1, 40))
    def test_idempotent_and_in_range(self, raw, n_max):
        t = to_tuple(raw, n_max)
        assert all(1 <= n <= n_max for n in t)
        assert to_tuple(list(t), n_max) == t


class TestRunTransfer:
    def test_zero_dataset(self):
        sim, prof = fixture_profile("read_bn")
        rep = run_transfer(sim, fixed_checkpoint(prof.optimal, prof), 0.0)
        assert rep.steps == 0 and rep.total_bytes == 0.0

    @pytest.mark.parametrize("name", sorted(TARGETS))
    def test_fixed_optimum_finishes_near_ideal_time(self, name):
        sim, prof = fixture_profile(name)
        data = 10 * MB_PER_GB
        rep = run_transfer(sim, fixed_checkpoint(prof.optimal, prof), data, deterministic=True)
        ideal = data / prof.bottleneck
        assert rep.completion_s == pytest.approx(ideal, rel=0.1)
        assert sum(r[6] for r in rep.rows) * sim.window == pytest.approx(data, rel=1e-12)
        assert all(1 <= s <= 2 for s in rep.first_reach().values())

    def test_explicit_start_tuple(self):
        sim, prof = fixture_profile("read_bn")
        rep = run_transfer(sim, fixed_checkpoint(prof.optimal, prof), 5000.0, deterministic=True, start=(1, 1, 1))
        assert rep.rows[0][1:4] == (1, 1, 1) and rep.rows[1][1:4] == tuple(prof.optimal)

    def test_report_round_trip(self, tmp_path):
        sim, prof = fixture_profile("net_bn")
        rep = run_transfer(sim, fixed_checkpoint(prof.optimal, prof, log_std=0.3), 2000.0,
                           rng=np.random.default_rng(4))
        rep.save(tmp_path, "r")
        back = TransferReport.load(tmp_path / "r.json")
        assert back.rows == rep.rows
        assert back.summary() == rep.summary()

    def test_stall_detected(self):
        spec = small_spec(cap_write=1e-3)
        ck = fixed_checkpoint((1, 1, 1), n_max=30)
        with pytest.raises(TransferStallError) as exc:
            run_transfer(Simulator(spec), ck, 500.0, deterministic=True, stall_limit=5)
        assert exc.value.report.steps >= 5
        assert 0 <= exc.value.report.total_bytes < 500.0

    def test_step_limit(self):
        with pytest.raises(TransferStallError):
            run_transfer(Simulator(small_spec()), fixed_checkpoint((1, 1, 1)), 1e6, max_steps=3)

    def test_timestamps_step_by_window(self):
        sim, prof = fixture_profile("write_bn")
        rep = run_transfer(sim, fixed_checkpoint(prof.optimal, prof), 3000.0, step_window=0.5,
                           deterministic=True)
        ts = [r[0] for r in rep.rows]
        assert ts == [0.5 * (i + 1) for i in range(len(ts))]


# ------------------------------------------------------------ live pipeline

def live_spec(**kw):
    base = dict(tpt_read=40.0, tpt_net=40.0, tpt_write=40.0, sender_capacity=30.0, receiver_capacity=30.0,
                chunk=1.0, window=0.25, retry_delta=0.002, n_max=8)
    base.update(kw)
    return small_spec(**base)


class TestPipelineEnv:
    def test_idle_pipeline_moves_nothing(self):
        with PipelineEnv(live_spec()) as env:
            out = env.step_window((0, 0, 0))
        assert out.stage_bytes == (0.0, 0.0, 0.0)

    def test_counters_conserve_bytes(self):
        # 100-step fuzz with short windows
        rng = np.random.default_rng(7)
        with PipelineEnv(live_spec(window=0.04)) as env:
            snd = rcv = 0.0
            for _ in range(100):
                out = env.step_window(rng.integers(0, 5, size=3))
                r, n, w = out.stage_bytes
                assert out.sender_used - snd == r - n
                assert out.receiver_used - rcv == n - w
                assert 0 <= out.sender_used <= 30 and 0 <= out.receiver_used <= 30
                snd, rcv = out.sender_used, out.receiver_used
            assert env.totals[0] - env.totals[1] == env.sender_used
            assert env.totals[1] - env.totals[2] == env.receiver_used

    def test_read_rate_scales_with_workers(self):
        spec = live_spec(sender_capacity=200.0, window=0.5)
        with PipelineEnv(spec) as env:
            one = env.step_window((1, 0, 0)).sample.t_r
            env.reset(threads=(0, 0, 0))
            two = env.step_window((2, 0, 0)).sample.t_r
        assert two == pytest.approx(2 * one, rel=0.25)

    def test_budget_cap_respected(self):
        with PipelineEnv(live_spec(cap_read=8.0, sender_capacity=100.0)) as env:
            out = env.step_window((4, 0, 0))
        assert out.stage_bytes[0] <= 8.0 * 0.25 + 1e-9

    def test_finite_dataset_completes(self):
        spec = live_spec()
        with PipelineEnv(spec) as env:
            rep = run_transfer(env, fixed_checkpoint((4, 4, 4), n_max=8), 12.0, deterministic=True,
                               stall_limit=10, max_steps=40)
            assert env.remaining_bytes() == 0.0
            assert env.totals == [12.0, 12.0, 12.0]
        assert rep.total_bytes == 12.0

    def test_rejects_out_of_range(self):
        with PipelineEnv(live_spec()) as env:
            with pytest.raises(ValueError):
                env.step_window((9, 1, 1))
