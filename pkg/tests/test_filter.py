import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reachguard import dp
from reachguard import filter as flt
from reachguard.envs import MarginSpec, goal_seeking_policy, make_env, step
from reachguard.outcome import Verdict, reach_avoid_outcome


def pd_ctrl(x):
    x = np.atleast_2d(x)
    return np.clip(-1.5 * x[:, :1] - 1.2 * x[:, 1:2], -1, 1)


def bang_dstb(x):
    x = np.atleast_2d(x)
    return 0.3 * np.where(x[:, 1:2] >= 0, 1.0, -1.0)


@pytest.fixture(scope="module")
def setup():
    env, m = make_env("double_integrator")
    return env, m, flt.GameplayPolicies(pd_ctrl, bang_dstb)


def random_states(env, rng, n):
    return rng.uniform([-1.0, -1.6], [1.0, 1.6], (n, 2))


# -- shield -------------------------------------------------------------------------------


def test_shield_case_split(setup):
    env, m, pols = setup
    sh = flt.shield(pols.ctrl, m)
    inside, outside = np.array([[0.0, 0.0]]), np.array([[0.7, 0.5]])
    assert np.array_equal(sh(inside), m.invariant_controller(inside))
    assert np.array_equal(sh(outside), pd_ctrl(outside))
    assert np.all(np.abs(sh(outside)) <= 1)


def test_shield_boundary_counts_as_target():
    m = MarginSpec(lambda x: np.ones(np.shape(x)[:-1]), lambda x: np.asarray(x)[..., 0] - 0.5,
                   lambda x: np.full(np.shape(x)[:-1] + (1,), 7.0))
    sh = flt.shield(lambda x: np.zeros(np.shape(x)[:-1] + (1,)), m)
    assert sh(np.array([[0.5, 0.0]]))[0, 0] == 7.0
    assert sh(np.array([[0.4999, 0.0]]))[0, 0] == 0.0


# -- monitor ------------------------------------------------------------------------------


def test_monitor_allows_inside_target(setup):
    env, m, pols = setup
    v = flt.monitor([0.0, 0.0], m.invariant_controller, flt.FilterConfig(horizon=10), pols, env, m)
    assert v.allow and v.reason is flt.Reason.REACHED_TARGET and v.step == 1


def test_monitor_reports_failure(setup):
    env, m, pols = setup
    # fast rightward motion near the wall: failure within a couple of steps
    v = flt.monitor([0.8, 1.0], lambda x: np.ones((len(x), 1)), flt.FilterConfig(horizon=10), pols, env, m)
    assert not v.allow and v.reason is flt.Reason.HIT_FAILURE
    assert v.step == 2
    assert v.rollout.g_seq[-1] < 0 and np.all(v.rollout.g_seq[:-1] >= 0)


def test_monitor_timeout_denies(setup):
    env, m, _ = setup
    idle = flt.GameplayPolicies(lambda x: np.zeros((len(x), 1)), lambda x: np.zeros((len(x), 1)))
    cfg = flt.FilterConfig(horizon=5)
    v = flt.monitor([0.6, 0.0], lambda x: np.zeros((len(x), 1)), cfg, idle, env, m)
    assert not v.allow and v.reason is flt.Reason.TIMEOUT and v.step == 5
    avoid = flt.monitor([0.6, 0.0], lambda x: np.zeros((len(x), 1)),
                        flt.FilterConfig(horizon=5, criterion="avoid_only"), idle, env, m)
    assert avoid.allow


def test_monitor_rejects_non_finite(setup):
    env, m, pols = setup
    with pytest.raises(ValueError, match="non-finite state"):
        flt.monitor([np.nan, 0.0], pd_ctrl, flt.FilterConfig(), pols, env, m)
    bad = flt.GameplayPolicies(pd_ctrl, lambda x: np.full((len(x), 1), np.nan))
    with pytest.raises(ValueError, match="non-finite"):
        flt.monitor([0.5, 0.0], pd_ctrl, flt.FilterConfig(horizon=3), bad, env, m)


def test_allow_iff_reached_target(setup, rng):
    env, m, pols = setup
    x = random_states(env, rng, 400)
    res = flt.monitor_batch(x, goal_seeking_policy(env), flt.FilterConfig(horizon=25), pols, env, m)
    assert np.array_equal(res["allow"], res["reason"] == 1)


def test_dp_oracle_players_allow_certified_states():
    env, m = make_env("double_integrator")
    grid = dp.StateGrid.from_box(env.state_box, 101)
    lat = dp.ActionLattice.uniform(env)
    H = 60
    vg = dp.solve(env, m, grid, lat, horizon=H)
    eta = dp.safe_slack(vg)
    X = grid.nodes()
    # states where the null action keeps the remaining game certified against every disturbance
    worst = np.min([dp.value_at(vg, step(env, X, np.zeros((len(X), 1)), np.full((len(X), 1), d)), 1)
                    for d in lat.disturbances[:, 0]], axis=0)
    X = X[worst >= eta]
    assert len(X) > 1000
    clock = {"t": 0}

    def ctrl(x):
        return lat.controls[vg.ctrl_policy[min(clock["t"], H - 1)][dp.nearest_node(grid, x)]]

    def dstb(x):
        d = lat.disturbances[vg.dstb_policy[min(clock["t"], H - 1)][dp.nearest_node(grid, x)]]
        clock["t"] += 1
        return d

    res = flt.monitor_batch(X, np.zeros((1, 1)), flt.FilterConfig(horizon=H), flt.GameplayPolicies(ctrl, dstb),
                            env, m)
    assert res["allow"].all()


def test_denial_certificate_replays_as_loss(setup, rng):
    env, m, pols = setup
    checked = 0
    for x in random_states(env, rng, 200):
        v = flt.monitor(x, goal_seeking_policy(env), flt.FilterConfig(horizon=30), pols, env, m)
        if v.reason is flt.Reason.HIT_FAILURE:
            r = reach_avoid_outcome(v.rollout.g_seq, v.rollout.l_seq, start=1)
            assert r.verdict is Verdict.LOSS
            # the certificate replays through the dynamics
            for k in range(v.rollout.horizon):
                s = v.rollout.states
                assert np.allclose(step(env, s[k], v.rollout.controls[k], v.rollout.disturbances[k]), s[k + 1])
            checked += 1
    assert checked > 10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31))
def test_criterion_dominance(H, seed):
    env, m = make_env("double_integrator")
    pols = flt.GameplayPolicies(pd_ctrl, bang_dstb)
    x = random_states(env, np.random.default_rng(seed), 50)
    task = goal_seeking_policy(env)
    ra = flt.monitor_batch(x, task, flt.FilterConfig(horizon=H), pols, env, m)["allow"]
    ao = flt.monitor_batch(x, task, flt.FilterConfig(horizon=H, criterion="avoid_only"), pols, env, m)["allow"]
    assert np.all(~ra | ao)


def test_avoid_only_monotone_in_horizon(setup, rng):
    env, m, pols = setup
    x = random_states(env, rng, 300)
    task = goal_seeking_policy(env)
    prev = None
    for H in range(1, 41):
        allow = flt.monitor_batch(x, task, flt.FilterConfig(horizon=H, criterion="avoid_only"), pols, env, m)["allow"]
        if prev is not None:
            assert np.all(prev | ~allow)  # denied at H stays denied at H+1
        prev = allow


# -- filter_step and critic filter ---------------------------------------------------------


def test_filter_step_switches(setup):
    env, m, pols = setup
    task = lambda x: np.full((len(np.atleast_2d(x)), 1), 0.123456789)
    cfg = flt.FilterConfig(horizon=20)
    x_ok, x_bad_out, x_bad_in = np.array([0.0, 0.0]), np.array([0.85, 1.9]), None
    res = flt.monitor_batch(x_ok[None], task, cfg, pols, env, m)
    assert res["allow"][0]
    assert flt.filter_step(x_ok, task, cfg, pols, env, m)[0] == 0.123456789
    assert np.array_equal(flt.filter_step(x_bad_out, lambda x: np.ones((len(np.atleast_2d(x)), 1)), cfg, pols, env, m),
                          pd_ctrl(x_bad_out)[0])
    # denied inside T: the invariant law takes over
    pushy = lambda x: np.ones((len(np.atleast_2d(x)), 1))
    evil = flt.GameplayPolicies(pd_ctrl, lambda x: np.full((len(x), 1), 0.3))
    tight = flt.FilterConfig(horizon=1)
    x_in = np.array([0.05, 0.0])
    if not flt.monitor_batch(x_in[None], pushy, tight, evil, env, m)["allow"][0]:
        assert np.array_equal(flt.filter_step(x_in, pushy, tight, evil, env, m), m.invariant_controller(x_in[None])[0])


def test_critic_filter_threshold(setup):
    env, m, _ = setup
    critic = flt.Mlp([4, 1], [np.array([[1.0], [0.0], [0.0], [0.0]]), np.zeros(1)])  # Q = position
    x = np.array([[0.5, 0.0], [-0.5, 0.0]])
    task_u = np.array([[0.9], [0.9]])
    fb = np.array([[-0.1], [-0.1]])
    out = flt.critic_filter_step(x, task_u, critic, 0.0, fb, bang_dstb)
    assert np.array_equal(out, [[0.9], [-0.1]])


def test_critic_filter_extreme_thresholds(setup, rng):
    env, m, _ = setup
    critic = flt.Mlp([4, 8, 1], rng=rng)
    pols = flt.GameplayPolicies(pd_ctrl, bang_dstb, critic)
    x0 = random_states(env, rng, 40)
    task = goal_seeking_policy(env)
    none = flt.run_filtered_batch(env, m, task, flt.FilterConfig(), pols, x0, 50, bang_dstb, scheme="none")
    lo = flt.run_filtered_batch(env, m, task, flt.FilterConfig(critic_threshold=-math.inf), pols, x0, 50,
                                bang_dstb, scheme="critic")
    hi = flt.run_filtered_batch(env, m, task, flt.FilterConfig(critic_threshold=math.inf), pols, x0, 50,
                                bang_dstb, scheme="critic")
    assert np.array_equal(lo.safe, none.safe) and lo.intervention_freq == 0.0
    shield_only = flt.run_filtered_batch(env, m, flt.shield(pd_ctrl, m), flt.FilterConfig(), pols, x0, 50,
                                         bang_dstb, scheme="none")
    assert np.array_equal(hi.safe, shield_only.safe)


# -- episodes and schedule ------------------------------------------------------------------


def test_scripted_schedule(setup):
    env, m, pols = setup
    L = 4
    verdicts = [True, False, False, False]
    task = lambda x: np.full((len(x), 1), 0.5)
    cfg = flt.FilterConfig(horizon=10, latency=L)
    _, stats, log = flt.run_filtered(env, m, task, cfg, pols, [-0.5, 0.0], 3 * L, lambda x: np.zeros((len(x), 1)),
                                     monitor_fn=lambda x, b: verdicts[b])
    labels = [r["policy"] for r in log]
    assert labels == ["shield"] * L + ["task"] * L + ["shield"] * L
    assert stats.monitor_calls == 3


@pytest.mark.parametrize("L,n", [(1, 7), (3, 7), (5, 10), (4, 13)])
def test_monitor_call_count(setup, L, n):
    env, m, pols = setup
    stats = flt.run_filtered_batch(env, m, goal_seeking_policy(env), flt.FilterConfig(horizon=10, latency=L), pols,
                                   np.array([[0.0, 0.0]]), n, bang_dstb)
    assert stats.monitor_calls == math.ceil(n / L)


def test_policy_changes_only_at_block_starts(setup, rng):
    env, m, pols = setup
    L = 5
    _, _, log = flt.run_filtered(env, m, goal_seeking_policy(env), flt.FilterConfig(horizon=15, latency=L), pols,
                                 [-0.3, 0.2], 40, bang_dstb)
    for k in range(1, len(log)):
        if log[k]["policy"] != log[k - 1]["policy"]:
            assert k % L == 0


def test_unit_latency_and_horizon_collapses_to_switching_rule(setup, rng):
    env, m, pols = setup
    cfg = flt.FilterConfig(horizon=1, latency=1)
    task = goal_seeking_policy(env)
    x0 = random_states(env, rng, 30)
    stats, rows, _ = flt.run_filtered_batch(env, m, task, cfg, pols, x0, 20, bang_dstb, record=True)
    x = x0.copy()
    alive = np.ones(len(x), bool)
    for k, xs, u, _, d, _ in rows:
        assert np.array_equal(xs, x)
        manual = flt.filter_step(x, task, cfg, pols, env, m)
        assert np.array_equal(u, np.clip(manual, -1, 1))
        x = np.where(alive[:, None], env.dynamics(x, u, d), x)
        alive &= m.failure_margin(x) >= 0
    assert np.array_equal(stats.safe, alive)


@pytest.mark.parametrize("L", [1, 3])
def test_shield_as_task_never_intervenes(setup, rng, L):
    env, m, pols = setup
    x0 = random_states(env, rng, 30)
    sh = flt.shield(pols.ctrl, m)
    stats, rows, x_end = flt.run_filtered_batch(env, m, sh, flt.FilterConfig(horizon=10, latency=L), pols, x0, 30,
                                                bang_dstb, record=True)
    ref, _, ref_end = flt.run_filtered_batch(env, m, sh, flt.FilterConfig(), pols, x0, 30, bang_dstb,
                                             scheme="none", record=True)
    assert stats.intervention_freq == 0.0
    assert np.array_equal(x_end, ref_end)


def test_episode_log_csv(tmp_path, setup):
    env, m, pols = setup
    _, _, log = flt.run_filtered(env, m, goal_seeking_policy(env), flt.FilterConfig(horizon=10), pols,
                                 [0.0, 0.0], 5, bang_dstb)
    p = tmp_path / "ep.csv"
    flt.write_episode_log(log, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "k,x0,x1,u0,u_task0,d0,policy" and len(lines) == 6


def test_config_validation():
    with pytest.raises(ValueError):
        flt.FilterConfig(horizon=3, latency=4)
    with pytest.raises(ValueError):
        flt.FilterConfig(latency=0)
    with pytest.raises(ValueError):
        flt.FilterConfig(criterion="maybe")
    assert flt.FilterConfig(horizon=5, latency=2).is_pipelined
