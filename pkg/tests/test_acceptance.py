"""Acceptance criteria, each checked at its stated tolerance and runtime budget.

Every test appends one ``criterion N: PASS|FAIL ...`` line that the terminal summary
prints at the end of the run. Training-based criteria use the desk-scale configs in
``configs/`` and share trained artifacts through session fixtures.
"""

import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import ACCEPTANCE_LINES
from gradcheck import numeric_grad, rel_error
from reachguard import bust, cli, dp, isaacs, nnet
from reachguard import filter as flt
from reachguard import service as svc
from reachguard.envs import goal_seeking_policy, make_env, step
from reachguard.outcome import Verdict, reach_avoid_outcome

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def desk(name):
    return cli.load_config(str(CONFIGS / f"desk_{name}.json"))


def report(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- shared artifacts ---------------------------------------------------------------------


@pytest.fixture(scope="session")
def di_dp():
    env, m = make_env("double_integrator")
    grid = dp.StateGrid.from_box(env.state_box, 101)
    lat = dp.ActionLattice.uniform(env)
    t0 = time.perf_counter()
    vg = dp.solve(env, m, grid, lat, horizon=60)
    return env, m, vg, time.perf_counter() - t0


@pytest.fixture(scope="session")
def di_ck():
    cfg = desk("double_integrator")
    env, m = make_env("double_integrator")
    t0 = time.perf_counter()
    ck = isaacs.train(env, m, cli.train_config(cfg), seed=cfg["seed"])
    return ck, time.perf_counter() - t0


@pytest.fixture(scope="session")
def pend_ck():
    cfg = desk("pendulum")
    env, m = make_env("pendulum")
    return isaacs.train(env, m, cli.train_config(cfg), seed=cfg["seed"])


# -- 1-5: oracles and invariants -------------------------------------------------------------


def _tree(env, m, grid, lat, H):
    axes = [list(a) for a in grid.axes()]
    memo = {}

    def interp(table, x):
        idx, fr = [], []
        for a, xi in zip(axes, x):
            xi = min(max(xi, a[0]), a[-1])
            h = a[1] - a[0]
            i = min(int((xi - a[0]) // h), len(a) - 2)
            idx.append(i)
            fr.append((xi - a[i]) / h)
        return sum((fr[0] if c0 else 1 - fr[0]) * (fr[1] if c1 else 1 - fr[1]) * table[idx[0] + c0][idx[1] + c1]
                   for c0 in (0, 1) for c1 in (0, 1))

    def value(i, j, k):
        if (i, j, k) in memo:
            return memo[i, j, k]
        x = np.array([axes[0][i], axes[1][j]])
        g, l = float(m.failure_margin(x)), float(m.target_margin(x))
        if k == H:
            v = min(l, g)
        else:
            table = [[value(a, b, k + 1) for b in range(len(axes[1]))] for a in range(len(axes[0]))]
            v = max(min(min(g, max(l, interp(table, step(env, x, u, d)))) for d in lat.disturbances)
                    for u in lat.controls)
        memo[i, j, k] = v
        return v

    return np.array([[[value(i, j, k) for j in range(len(axes[1]))] for i in range(len(axes[0]))]
                     for k in range(H + 1)])


def test_criterion_1_dp_matches_game_tree():
    t0 = time.perf_counter()
    env, m = make_env("double_integrator")
    grid = dp.StateGrid.from_box(env.state_box, 5)
    lat = dp.ActionLattice.uniform(env, 3, 3)
    vg = dp.solve(env, m, grid, lat, horizon=3)
    err = float(np.max(np.abs(vg.values - _tree(env, m, grid, lat, 3))))
    dt = time.perf_counter() - t0
    report(1, err <= 1e-12 and dt < 10, f"max |DP - game tree| = {err:.2e} (tol 1e-12), {dt:.2f}s (< 10s)")


def test_criterion_2_dp_invariants(di_dp):
    t0 = time.perf_counter()
    env, m, vg, solve_time = di_dp
    nodes = vg.grid.nodes()
    g = m.failure_margin(nodes).reshape(vg.grid.shape)
    l = m.target_margin(nodes).reshape(vg.grid.shape)
    terminal = bool(np.array_equal(vg.values[-1], np.minimum(l, g)))
    bracket = bool(np.all(np.minimum(l, g) <= vg.values) and np.all(vg.values <= g))
    env0, m0 = make_env("double_integrator", d_max=0.0)
    v0 = dp.solve(env0, m0, vg.grid, dp.ActionLattice.uniform(env0), horizon=vg.horizon).values
    worst = float(np.max(vg.values - v0))
    dt = time.perf_counter() - t0 + solve_time
    ok = terminal and bracket and worst <= 0 and dt < 120
    report(2, ok, f"terminal identity {terminal}, bracket {bracket}, max(V_d0.3 - V_d0) = {worst:.3g} (<= 0), "
                  f"{dt:.1f}s (< 120s)")


def test_criterion_3_dp_policy_soundness(di_dp):
    t0 = time.perf_counter()
    env, m, vg, solve_time = di_dp
    eta = dp.safe_slack(vg)
    x = dp.certified_nodes(vg, eta)
    lat, H = vg.lattice, vg.horizon
    g_hist, l_hist = [m.failure_margin(x)], [m.target_margin(x)]
    for k in range(H):
        node = dp.nearest_node(vg.grid, x)
        x = step(env, x, lat.controls[vg.ctrl_policy[k][node]], lat.disturbances[vg.dstb_policy[k][node]])
        g_hist.append(m.failure_margin(x))
        l_hist.append(m.target_margin(x))
    g_hist, l_hist = np.array(g_hist), np.array(l_hist)
    verdicts = [reach_avoid_outcome(g_hist[:, i], l_hist[:, i]).verdict for i in range(g_hist.shape[1])]
    wins = sum(v is Verdict.WIN for v in verdicts)
    losses = sum(v is Verdict.LOSS for v in verdicts)
    dt = time.perf_counter() - t0 + solve_time
    report(3, wins == len(verdicts) and dt < 120,
           f"{wins}/{len(verdicts)} nodes with V_0 >= eta={eta:.4f} win, {losses} failures, {dt:.1f}s (< 120s)")


def test_criterion_4_gradient_suite():
    rng = np.random.default_rng(2024)
    worst, count = 0.0, 0
    for _ in range(100):
        sizes = [int(rng.integers(1, 5))] + [int(rng.integers(2, 6)) for _ in range(int(rng.integers(0, 3)))] + [
            int(rng.integers(1, 4))]
        net = nnet.Mlp(sizes, rng=rng)
        x = rng.normal(size=(3, sizes[0]))
        w = rng.normal(size=(3, sizes[-1]))
        grads, dx = nnet.grad(net, x, w)
        f = lambda: float(np.sum(w * net.forward(x)))  # noqa: E731
        worst = max(worst, rel_error(grads, numeric_grad(f, net.params)), rel_error([dx], numeric_grad(f, [x])))
        count += 1
    for trial in range(100):
        batch = {"x": rng.normal(size=(4, 2)), "u": rng.uniform(-1, 1, (4, 1)), "d": rng.uniform(-0.3, 0.3, (4, 1))}
        critic = nnet.Mlp([4, 5, 1], rng=rng)
        y = rng.normal(size=4)
        _, g = isaacs.critic_loss_and_grads(batch, y, critic)
        worst = max(worst, rel_error(g, numeric_grad(lambda: isaacs.critic_loss_and_grads(batch, y, critic)[0],
                                                     critic.params)))
        player = ("ctrl", "dstb")[trial % 2]
        actor = nnet.StochasticPolicy.create(2, (4,), [[-1, 1]] if player == "ctrl" else [[-0.3, 0.3]], rng)
        z = rng.normal(size=(4, 1))
        a = rng.uniform(0, 0.3)
        _, g = isaacs.actor_loss_and_grads(batch, actor, critic, a, player, z)
        loss = lambda: isaacs.actor_loss_and_grads(batch, actor, critic, a, player, z)[0]  # noqa: E731
        worst = max(worst, rel_error(g, numeric_grad(loss, actor.params)))
        count += 2
    report(4, worst < 1e-4, f"{count} instances (MLP, critic loss, both actor losses), worst relative error "
                            f"{worst:.2e} (tol 1e-4)")


def test_criterion_5_critic_target_arithmetic():
    levels = (-0.7, 0.0, 0.2, 0.9)
    cases = list(itertools.product(levels, repeat=3))
    g, l, q = (np.array([c[i] for c in cases]) for i in range(3))
    zero = lambda x: np.zeros((len(x), 0))  # noqa: E731
    critic = nnet.Mlp([len(cases), 1], [q[:, None].copy(), np.zeros(1)])
    mismatches = 0
    for gamma in (0.0, 0.5, 0.9, 1 - 1e-6):
        y = isaacs.critic_target({"x_next": np.eye(len(cases)), "l_next": l, "g_next": g}, gamma, critic, zero, zero,
                                 np.random.default_rng(0))
        for i in range(len(cases)):
            game = g[i] if (g[i] <= l[i] or g[i] <= q[i]) else (l[i] if l[i] >= q[i] else q[i])
            cons = l[i] if l[i] <= g[i] else g[i]
            mismatches += y[i] != gamma * game + (1 - gamma) * cons
    report(5, mismatches == 0, f"{len(cases)} orderings x 4 discounts, {mismatches} inexact targets")


# -- 6: learned filter against the DP adversary ----------------------------------------------


def test_criterion_6_filter_vs_oracle(di_dp, di_ck):
    t0 = time.perf_counter()
    env, m, vg, solve_time = di_dp
    ck, train_time = di_ck
    cfg = desk("double_integrator")
    eta = dp.safe_slack(vg)
    cert = dp.certified_nodes(vg, eta)
    x0 = cert[np.random.default_rng(cfg["seed"]).choice(len(cert), 500, replace=False)]
    grid, lat = vg.grid, vg.lattice
    dp_adv = lambda x: lat.disturbances[vg.dstb_policy[0][dp.nearest_node(grid, x)]]  # noqa: E731
    pols = flt.GameplayPolicies.from_checkpoint(ck)
    task = goal_seeking_policy(env, m)
    fcfg = cli.filter_config(cfg)
    filt = flt.run_filtered_batch(env, m, task, fcfg, pols, x0, 300, dp_adv)
    raw = flt.run_filtered_batch(env, m, task, fcfg, pols, x0, 300, dp_adv, scheme="none")
    dt = time.perf_counter() - t0 + train_time + solve_time
    ok = filt.safe_rate >= 0.95 and raw.safe_rate <= 0.5 and dt < 1800
    report(6, ok, f"filtered safe rate {filt.safe_rate:.3f} (>= 0.95, H={fcfg.horizon}, L={fcfg.latency}, "
                  f"intervention freq {filt.intervention_freq:.3f}), unfiltered {raw.safe_rate:.3f} (<= 0.5), "
                  f"{dt / 60:.1f} min incl. training (< 30)")


# -- 7: horizon trends on the pendulum --------------------------------------------------------


def test_criterion_7_horizon_trends(pend_ck):
    cfg = desk("pendulum")
    env, m = make_env("pendulum")
    fcfg = cli.filter_config(cfg)
    pols = flt.GameplayPolicies.from_checkpoint(pend_ck)
    task = goal_seeking_policy(env, m)
    scheme = bust.standard_schemes(env, m, pols, task, fcfg)[2]
    adv, _ = bust.train_bust_adversary(env, m, scheme, cli._bust_cfg(cfg), cfg["seed"])
    s = cfg["sweep"]
    x0 = cli.initial_states(env, s["episodes"], cfg["seed"], 2)
    rows = cli.sweep_horizon_rows(env, m, task, pols, fcfg, s["horizons"], x0, s["episode_len"], adv)
    ra = {r["horizon"]: r for r in rows if r["criterion"] == "reach_avoid"}
    ao = {r["horizon"]: r for r in rows if r["criterion"] == "avoid_only"}
    hs = sorted(ra)
    ordering = all(ra[h]["safe_rate"] >= ao[h]["safe_rate"] for h in hs)
    strict = ra[hs[0]]["safe_rate"] > ao[hs[0]]["safe_rate"]
    rho = spearmanr(hs, [ra[h]["intervention_freq"] for h in hs]).statistic
    rho = 0.0 if np.isnan(rho) else float(rho)  # constant frequency: no trend
    detail = ", ".join(f"H={h}: RA {ra[h]['safe_rate']:.2f}/{ra[h]['intervention_freq']:.2f} "
                       f"AO {ao[h]['safe_rate']:.2f}" for h in hs)
    report(7, ordering and strict and rho <= 0,
           f"RA >= AO at all H: {ordering}; strict at H={hs[0]}: {strict}; Spearman rho(freq, H) = {rho:.2f} (<= 0) "
           f"[{detail}]")


# -- 8: stress-test ordering ------------------------------------------------------------------


def test_criterion_8_bust_ordering(di_ck):
    ck, _ = di_ck
    cfg = desk("double_integrator")
    env, m = make_env("double_integrator")
    fcfg = cli.filter_config(cfg)
    pols = flt.GameplayPolicies.from_checkpoint(ck)
    task = goal_seeking_policy(env, m)
    s = cfg["sweep"]
    _, eps = cli.sweep_epsilon(env, m, task, pols, fcfg, [cli.parse_eps(e) for e in cli.DEFAULTS["sweep"]["epsilons"]],
                               s["validation_seeds"], s["episodes"], s["episode_len"], pols.dstb)
    schemes = bust.standard_schemes(env, m, pols, task, fcfg, eps)
    b = cfg["bust"]
    mat = cli.run_bust(env, m, schemes, cli._bust_cfg(cfg), cfg["seed"], b["episodes"], b["episode_len"])
    weaker_random = all(mat.cell(sc, f"bust:{sc}") <= min(mat.cell(sc, "rnd"), mat.cell(sc, "rnd+"))
                        for sc in mat.rows)
    game_dominates = all(mat.cell("gameplay_filter", c) >= mat.cell("task", c) for c in mat.cols)
    table = "; ".join(f"{r}: " + " ".join(f"{v:.2f}" for v in row) for r, row in zip(mat.rows, mat.values))
    report(8, weaker_random and game_dominates,
           f"own BUST <= random for every scheme: {weaker_random}; gameplay >= task under every adversary: "
           f"{game_dominates}; critic eps={eps}; columns {mat.cols} [{table}]")


# -- 9: violation curves ------------------------------------------------------------------------


def test_criterion_9_violation_curves(tmp_path):
    cfg = desk("pendulum")
    env, m = make_env("pendulum")
    tcfg = isaacs.TrainConfig.from_dict({**cli.train_config(cfg).to_dict(), "total_steps": 100_000})
    ra = isaacs.train(env, m, tcfg, seed=cfg["seed"])
    rw = isaacs.train_reward_baseline(env, m, tcfg, mode="adversarial", seed=cfg["seed"])
    rows = [{"step": a["step"], "reach_avoid": a["cumulative_violations"], "reward": b["cumulative_violations"]}
            for a, b in zip(ra.metrics, rw.metrics)]
    cli.write_rows(tmp_path / "violation_curves.csv", ["step", "reach_avoid", "reward"], rows)
    a, b = rows[-1]["reach_avoid"], rows[-1]["reward"]
    report(9, a <= b and (tmp_path / "violation_curves.csv").exists(),
           f"cumulative violations at step {rows[-1]['step']}: reach-avoid {a}, sparse reward {b} (need <=)")


# -- 10: service equivalence ----------------------------------------------------------------------


def test_criterion_10_service_equivalence(di_ck):
    ck, _ = di_ck
    env, m = make_env("double_integrator")
    cfg = cli.filter_config(desk("double_integrator"))
    pols = flt.GameplayPolicies.from_checkpoint(ck)
    service = svc.FilterService(env, m, pols, cfg)
    server = svc.serve(service, "127.0.0.1:0", background=True)
    rng = np.random.default_rng(10)
    ids = list(service.task_policies)
    agree = 0
    errors_ok = True
    try:
        with svc.FilterClient(server.address) as client:
            for i in range(1000):
                x = rng.uniform(env.state_box[:, 0], env.state_box[:, 1])
                pid = ids[i % len(ids)]
                resp = client.request(x, pid, block_index=i)
                ref = flt.monitor(x, service.task_policies[pid], cfg, pols, env, m)
                agree += resp["allow"] == ref.allow and resp["rollout_digest"]["step"] == ref.step
                if i % 100 == 0:
                    bad = client.send_raw(b'{"protocol_version": 1, "state": [1, 2, 3], "task_policy_id": "null"}')
                    junk = client.send_raw(b"not json")
                    errors_ok &= bad.get("error", {}).get("code") == "bad_state_dim"
                    errors_ok &= junk.get("error", {}).get("code") == "bad_json"
    finally:
        server.stop()
    report(10, agree == 1000 and errors_ok,
           f"{agree}/1000 service verdicts equal in-process; malformed requests answered with structured errors "
           f"on a live connection: {errors_ok}")


# -- 11: determinism of the CLI artifacts ----------------------------------------------------------


def test_criterion_11_cli_determinism(tmp_path):
    smoke = str(CONFIGS / "smoke.json")
    q = ["--log-level", "WARNING"]
    same = {}
    for rep in ("a", "b"):
        d = tmp_path / rep
        assert cli.main([*q, "dp-solve", "--config", smoke, "--seed", "5", "--out", str(d / "dp")]) == 0
        assert cli.main([*q, "train", "--config", smoke, "--seed", "5", "--out", str(d / "train")]) == 0
        assert cli.main([*q, "bust", "--config", smoke, "--seed", "5", "--checkpoint", str(d / "train" / "checkpoint"),
                         "--out", str(d / "bust")]) == 0
    artifacts = ["dp/value_grid.rgvg", "dp/value_grid.rgvg.json", "dp/safe_set.csv",
                 "train/checkpoint/ctrl_actor.json", "train/checkpoint/dstb_actor.json",
                 "train/checkpoint/critic.json", "train/checkpoint/critic_target.json",
                 "train/checkpoint/leaderboard/index.json", "train/metrics.csv", "bust/bust_matrix.csv"]
    for name in artifacts:
        same[name] = (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for f in sorted((tmp_path / "a" / "bust" / "adversaries").glob("*.json")):
        same[f"bust/adversaries/{f.name}"] = f.read_bytes() == (tmp_path / "b" / "bust" / "adversaries" / f.name).read_bytes()
    diff = [k for k, v in same.items() if not v]
    report(11, not diff, f"{len(same)} primary artifacts compared across reruns; differing: {diff or 'none'}")
