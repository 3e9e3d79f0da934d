"""Command-line entry point.

Every command reads one JSON config (sections ``env``, ``dp``, ``train``, ``filter``,
``bust``, ``sweep``, ``run``, ``serve``), applies flag overrides, writes the
effective config to ``<out>/config.json`` and then its CSV and PNG outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import signal
import sys
import time
from pathlib import Path

import numpy as np

from . import bust, dp, isaacs, nnet, plotting, service
from . import filter as flt
from .envs import ENVIRONMENTS, goal_seeking_policy, make_env, sample_initial

log = logging.getLogger("reachguard")

SEED_ENV_VAR = "REACHGUARD_SEED"

DEFAULTS = {
    "env": {"name": "double_integrator", "overrides": {}},
    "seed": None,
    "dp": {"points": 101, "ctrl_points": 5, "dstb_points": 5, "mode": "finite", "horizon": 60, "gamma": 0.99,
           "tol": 1e-6, "max_iter": 10_000},
    "train": {},
    "filter": {"horizon": 30, "latency": 1, "criterion": "reach_avoid", "critic_threshold": 0.0},
    "bust": {"episodes": 1000, "episode_len": 300, "train_steps": None},
    "sweep": {"horizons": [10, 20, 30, 40, 50], "episodes": 200, "episode_len": 300,
              "epsilons": ["-inf", -0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2, "inf"], "validation_seeds": [101, 102, 103]},
    "run": {"episodes": 1, "episode_len": 300, "task": "goal_seeking", "adversary": "learned", "scheme": "gameplay",
            "x0": None},
    "serve": {"bind": "127.0.0.1:8765"},
}


class ConfigError(Exception):
    pass


# -- config ------------------------------------------------------------------------------


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for key, value in user.items():
        if key not in cfg:
            raise ConfigError(f"{path}: unknown section {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: section {key!r} must be an object")
            if key not in ("train",) and key != "env":
                unknown = set(value) - set(cfg[key])
                if unknown:
                    raise ConfigError(f"{path}: unknown keys in {key!r}: {sorted(unknown)}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def apply_flags(cfg: dict, args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("env"):
        cfg["env"]["name"] = get("env")
    if get("horizon") is not None:
        cfg["filter"]["horizon"] = get("horizon")
    if get("latency_block") is not None:
        cfg["filter"]["latency"] = get("latency_block")
    if get("criterion"):
        cfg["filter"]["criterion"] = get("criterion")
    if get("epsilon") is not None:
        cfg["filter"]["critic_threshold"] = get("epsilon")
    if get("bind"):
        cfg["serve"]["bind"] = get("bind")
    if get("steps") is not None:
        cfg["train"]["total_steps"] = get("steps")
    if get("dp_horizon") is not None:
        cfg["dp"]["horizon"] = get("dp_horizon")
    if get("points") is not None:
        cfg["dp"]["points"] = get("points")
    if get("horizons"):
        cfg["sweep"]["horizons"] = get("horizons")
    if get("epsilons"):
        cfg["sweep"]["epsilons"] = get("epsilons")
    if get("episodes") is not None:
        for sec in ("bust", "sweep", "run"):
            cfg[sec]["episodes"] = get("episodes")
    if get("episode_len") is not None:
        for sec in ("bust", "sweep", "run"):
            cfg[sec]["episode_len"] = get("episode_len")
    if get("bust_steps") is not None:
        cfg["bust"]["train_steps"] = get("bust_steps")
    if get("adversary"):
        cfg["run"]["adversary"] = get("adversary")
    if get("scheme"):
        cfg["run"]["scheme"] = get("scheme")
    cfg["seed"] = resolve_seed(get("seed"), cfg.get("seed"))
    return cfg


def resolve_seed(flag, config_value) -> int:
    for candidate in (flag, config_value, os.environ.get(SEED_ENV_VAR)):
        if candidate is not None and candidate != "":
            try:
                return int(candidate)
            except (TypeError, ValueError):
                raise ConfigError(f"seed must be an integer, got {candidate!r}") from None
    return 0


def env_from(cfg: dict):
    name = cfg["env"]["name"]
    if name not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {name!r} (choose from {', '.join(ENVIRONMENTS)})")
    try:
        return make_env(name, **cfg["env"].get("overrides", {}))
    except TypeError as e:
        raise ConfigError(f"bad environment override: {e}") from None


def train_config(cfg: dict) -> isaacs.TrainConfig:
    try:
        return isaacs.TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def filter_config(cfg: dict) -> flt.FilterConfig:
    try:
        return flt.FilterConfig(**cfg["filter"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"filter section: {e}") from None


def effective(cfg: dict) -> dict:
    out = copy.deepcopy(cfg)
    out["train"] = train_config(cfg).to_dict()
    return out


def prepare_out(args, cfg: dict) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(effective(cfg), indent=2, sort_keys=True))
    return out


def write_rows(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def parse_eps(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"bad threshold {v!r}") from None


def load_checkpoint(args, env):
    if not getattr(args, "checkpoint", None):
        raise ConfigError("this command needs --checkpoint")
    try:
        ck = isaacs.PolicyCheckpoint.load(args.checkpoint, with_buffer=False)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from None
    if ck.env_name != env.name:
        raise ConfigError(f"checkpoint was trained on {ck.env_name!r}, config selects {env.name!r}")
    return ck


def adversary_from(spec: str, ck, env, seed: int):
    """``learned`` (checkpoint's best adversary), ``rnd``, ``rnd+``, or a path to a policy JSON."""
    if spec == "learned":
        return ck.best("dstb").mean_action
    if spec in ("rnd", "rnd+"):
        return bust.random_disturbance(env.dstb_bounds, "uniform" if spec == "rnd" else "extreme",
                                       np.random.default_rng([seed, 3]))
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"adversary must be learned, rnd, rnd+ or a policy file; {spec!r} not found")
    return nnet.load_policy(path).mean_action


def initial_states(env, n: int, seed: int, stream: int) -> np.ndarray:
    return sample_initial(env, np.random.default_rng([seed, stream]), n)


# -- commands ------------------------------------------------------------------------------


def cmd_dp_solve(args, cfg) -> int:
    env, m = env_from(cfg)
    c = cfg["dp"]
    out = prepare_out(args, cfg)
    grid = dp.StateGrid.from_box(env.state_box, c["points"])
    lattice = dp.ActionLattice.uniform(env, c["ctrl_points"], c["dstb_points"])
    t0 = time.perf_counter()
    vg = dp.solve(env, m, grid, lattice, mode=c["mode"], horizon=c["horizon"], gamma=c["gamma"], tol=c["tol"],
                  max_iter=c["max_iter"])
    elapsed = time.perf_counter() - t0
    dp.save(vg, out / "value_grid.rgvg")
    eta = dp.safe_slack(vg)
    pts = dp.zero_level_slice(vg)
    with open(out / "safe_set.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "x1"])
        w.writerows([repr(float(a)), repr(float(b))] for a, b in pts)
    summary = {"eta": eta, "certified_nodes": int(len(dp.certified_nodes(vg, eta))),
               "nonnegative_nodes": int(np.sum(vg.values[0] >= 0)), "nodes": grid.size,
               "outside_successors": vg.meta["outside_successors"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if grid.ndim >= 2:
        plotting.value_slice(vg, out / "value_slice.png")
    log.info("dp-solve: %d nodes in %.1fs, eta=%.4g, %d certified", grid.size, elapsed, eta,
             summary["certified_nodes"])
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args, cfg) -> int:
    env, m = env_from(cfg)
    tcfg = train_config(cfg)
    if args.objective:
        tcfg = isaacs.TrainConfig.from_dict({**tcfg.to_dict(), "objective": args.objective})
    out = prepare_out(args, cfg)
    seed = cfg["seed"]
    resume = None
    if args.resume:
        resume = isaacs.PolicyCheckpoint.load(args.resume)
    ck = isaacs.train(env, m, tcfg, seed, resume=resume)
    ck.save(out / "checkpoint")
    isaacs.write_metrics(ck.metrics, out / "metrics.csv")
    plotting.training_curves(ck.metrics, out / "training.png")
    curves = {tcfg.objective: ck.metrics}
    if args.compare_reward:
        base = isaacs.train_reward_baseline(env, m, tcfg, mode=args.reward_players, seed=seed)
        base.save(out / "reward" / "checkpoint")
        isaacs.write_metrics(base.metrics, out / "reward" / "metrics.csv")
        curves["reward"] = base.metrics
        rows = [{"step": a["step"], "reach_avoid": a["cumulative_violations"], "reward": b["cumulative_violations"]}
                for a, b in zip(ck.metrics, base.metrics)]
        write_rows(out / "violation_curves.csv", ["step", "reach_avoid", "reward"], rows)
    plotting.violation_curves({k: ([r["step"] for r in v], [r["cumulative_violations"] for r in v])
                               for k, v in curves.items()}, out / "violations.png")
    last = ck.metrics[-1] if ck.metrics else {}
    print(json.dumps({"steps": ck.step, "eval_safe_rate": last.get("eval_safe_rate"),
                      "violations": last.get("cumulative_violations")}))
    return 0


def _bust_cfg(cfg) -> isaacs.TrainConfig:
    tcfg = train_config(cfg)
    steps = cfg["bust"]["train_steps"]
    if steps is not None:
        tcfg = isaacs.TrainConfig.from_dict({**tcfg.to_dict(), "total_steps": int(steps)})
    return tcfg


def cmd_sweep_horizon(args, cfg) -> int:
    env, m = env_from(cfg)
    ck = load_checkpoint(args, env)
    fcfg = filter_config(cfg)
    s = cfg["sweep"]
    out = prepare_out(args, cfg)
    seed = cfg["seed"]
    pols = flt.GameplayPolicies.from_checkpoint(ck)
    task = goal_seeking_policy(env, m)
    if args.adversary:
        adv = adversary_from(args.adversary, ck, env, seed)
    else:
        scheme = bust.standard_schemes(env, m, pols, task, fcfg, fcfg.critic_threshold)[2]
        adv, bck = bust.train_bust_adversary(env, m, scheme, _bust_cfg(cfg), seed)
        nnet.save_json(bck.best("dstb"), out / "bust_adversary.json")
    x0 = initial_states(env, s["episodes"], seed, 2)
    rows = sweep_horizon_rows(env, m, task, pols, fcfg, s["horizons"], x0, s["episode_len"], adv)
    write_rows(out / "sweep_horizon.csv", ["horizon", "criterion", "safe_rate", "intervention_freq", "distance"], rows)
    plotting.horizon_sweep(rows, out / "sweep_horizon.png")
    return 0


def sweep_horizon_rows(env, m, task, pols, fcfg, horizons, x0, episode_len, adversary) -> list:
    rows = []
    base = {}
    for name, scheme in (("critic_filter", "critic"), ("unfiltered", "none")):
        base[name] = flt.run_filtered_batch(env, m, task, fcfg, pols, x0, episode_len, adversary, scheme=scheme)
    for H in horizons:
        for crit in ("reach_avoid", "avoid_only"):
            c = flt.FilterConfig(int(H), min(fcfg.latency, int(H)), crit, fcfg.critic_threshold, fcfg.pipelined)
            st = flt.run_filtered_batch(env, m, task, c, pols, x0, episode_len, adversary)
            rows.append(_row(H, crit, st))
        for name, st in base.items():
            rows.append(_row(H, name, st))
    return rows


def _row(H, crit, st) -> dict:
    return {"horizon": int(H), "criterion": crit, "safe_rate": st.safe_rate,
            "intervention_freq": st.intervention_freq, "distance": float(np.mean(st.progress))}


def cmd_sweep_epsilon(args, cfg) -> int:
    env, m = env_from(cfg)
    ck = load_checkpoint(args, env)
    fcfg = filter_config(cfg)
    s = cfg["sweep"]
    out = prepare_out(args, cfg)
    pols = flt.GameplayPolicies.from_checkpoint(ck)
    adv = adversary_from(args.adversary or "learned", ck, env, cfg["seed"])
    eps = [parse_eps(e) for e in s["epsilons"]]
    rows, chosen = sweep_epsilon(env, m, goal_seeking_policy(env, m), pols, fcfg, eps, s["validation_seeds"],
                                 s["episodes"], s["episode_len"], adv)
    write_rows(out / "sweep_epsilon.csv", ["epsilon", "safe_rate", "intervention_freq", "distance"], rows)
    (out / "chosen_epsilon.json").write_text(json.dumps({"epsilon": repr(chosen)}))
    plotting.epsilon_sweep(rows, chosen, out / "sweep_epsilon.png")
    print(json.dumps({"epsilon": repr(chosen)}))
    return 0


def sweep_epsilon(env, m, task, pols, fcfg, epsilons, seeds, episodes, episode_len, adversary):
    """Critic-filter threshold sweep; picks the best (safe rate, then progress) over the validation seeds."""
    rows = []
    for e in epsilons:
        c = flt.FilterConfig(fcfg.horizon, fcfg.latency, fcfg.criterion, e)
        stats = [flt.run_filtered_batch(env, m, task, c, pols, initial_states(env, episodes, sd, 2), episode_len,
                                        adversary, scheme="critic") for sd in seeds]
        rows.append({"epsilon": e, "safe_rate": float(np.mean([st.safe_rate for st in stats])),
                     "intervention_freq": float(np.mean([st.intervention_freq for st in stats])),
                     "distance": float(np.mean([np.mean(st.progress) for st in stats]))})
    best = max(range(len(rows)), key=lambda i: (rows[i]["safe_rate"], -rows[i]["distance"], -i))
    return rows, rows[best]["epsilon"]


def cmd_bust(args, cfg) -> int:
    env, m = env_from(cfg)
    ck = load_checkpoint(args, env)
    fcfg = filter_config(cfg)
    b = cfg["bust"]
    out = prepare_out(args, cfg)
    seed = cfg["seed"]
    pols = flt.GameplayPolicies.from_checkpoint(ck)
    schemes = bust.standard_schemes(env, m, pols, goal_seeking_policy(env, m), fcfg, fcfg.critic_threshold)
    mat = run_bust(env, m, schemes, _bust_cfg(cfg), seed, b["episodes"], b["episode_len"], args.jobs,
                   out / "adversaries")
    mat.to_csv(out / "bust_matrix.csv")
    plotting.safe_rate_matrix(mat, out / "bust_matrix.png")
    if mat.notes:
        (out / "notes.txt").write_text("\n".join(mat.notes) + "\n")
    return 0


def run_bust(env, m, schemes, tcfg, seed, episodes, episode_len, jobs=1, save_dir=None) -> bust.SafeRateMatrix:
    advs = bust.random_adversaries(env)
    for i, scheme in enumerate(schemes):
        log.info("training stress-test adversary against %s", scheme.label)
        policy, bck = bust.train_bust_adversary(env, m, scheme, tcfg, seed * 100 + i)
        if save_dir is not None:
            Path(save_dir).mkdir(parents=True, exist_ok=True)
            nnet.save_json(bck.best("dstb"), Path(save_dir) / f"{scheme.label}.json")
        advs.append((f"bust:{scheme.label}", lambda rng, p=policy: p))
    return bust.evaluate_matrix(env, m, schemes, advs, episodes, episode_len, seed, jobs)


def cmd_run(args, cfg) -> int:
    env, m = env_from(cfg)
    ck = load_checkpoint(args, env)
    fcfg = filter_config(cfg)
    r = cfg["run"]
    out = prepare_out(args, cfg)
    seed = cfg["seed"]
    pols = flt.GameplayPolicies.from_checkpoint(ck)
    if r["task"] != "goal_seeking":
        raise ConfigError("run.task must be 'goal_seeking'")
    task = goal_seeking_policy(env, m)
    if r["x0"] is not None:
        x0 = np.atleast_2d(np.asarray(r["x0"], dtype=float))
        if x0.shape[1] != env.state_dim:
            raise ConfigError(f"run.x0 needs {env.state_dim} entries per state")
    else:
        x0 = initial_states(env, r["episodes"], seed, 4)
    scheme = r["scheme"]
    if scheme not in ("gameplay", "critic", "none"):
        raise ConfigError("run.scheme must be gameplay, critic or none")
    server = client = None
    monitor_fn = None
    if args.via_service:
        if scheme != "gameplay":
            raise ConfigError("--via-service needs the gameplay scheme")
        if args.bind:
            client = service.FilterClient(args.bind)
        else:
            server = service.serve(service.FilterService(env, m, pols, fcfg), "127.0.0.1:0", background=True)
            client = service.FilterClient(server.address)
    summary = []
    try:
        for i, x in enumerate(x0):
            adv = adversary_from(r["adversary"], ck, env, seed * 1000 + i)
            if client is not None:
                monitor_fn = service.monitor_via_service(client, "goal_seeking")
            traj, stats, rows = flt.run_filtered(env, m, task, fcfg, pols, x, r["episode_len"], adv, scheme=scheme,
                                                 monitor_fn=monitor_fn)
            flt.write_episode_log(rows, out / f"episode_{i:03d}.csv")
            if i < 10:
                plotting.episode(traj, rows, out / f"episode_{i:03d}.png", dims=tuple(env.position_dims[:1]) + (
                    env.position_dims[1] if len(env.position_dims) > 1 else 1,))
            summary.append({"episode": i, "safe": bool(stats.safe[0]), "steps": int(stats.steps[0]),
                            "interventions": int(stats.interventions[0]),
                            "intervention_freq": stats.intervention_freq,
                            "final_distance": float(stats.progress[0]), "time_to_goal": int(stats.time_to_goal[0])})
    finally:
        if client is not None:
            client.close()
        if server is not None:
            server.stop()
    write_rows(out / "summary.csv", list(summary[0]), summary)
    print(json.dumps({"episodes": len(summary), "safe_rate": float(np.mean([s["safe"] for s in summary]))}))
    return 0


def cmd_serve(args, cfg) -> int:
    env, m = env_from(cfg)
    ck = load_checkpoint(args, env)
    fcfg = filter_config(cfg)
    if args.out:
        prepare_out(args, cfg)
    svc = service.FilterService(env, m, flt.GameplayPolicies.from_checkpoint(ck), fcfg)
    try:
        server = service.FilterServer(service.parse_bind(cfg["serve"]["bind"]), svc)
    except ValueError as e:
        raise ConfigError(str(e)) from None

    def _term(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, _term)
    print(f"listening on {server.address}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.drain()
    return 0


# -- parser ---------------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reachguard", description="Reach-avoid safety filters: solve, train, stress-test.")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--env", help="environment name")
        sp.add_argument("--seed", type=int, help=f"global seed (fallback: ${SEED_ENV_VAR}, then 0)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads where a command supports it")
        return sp

    def filt(sp):
        sp.add_argument("--checkpoint", help="training checkpoint directory")
        sp.add_argument("--horizon", type=int, help="monitor horizon H in steps")
        sp.add_argument("--latency-block", type=int, help="decision block length L in steps")
        sp.add_argument("--criterion", choices=["reach_avoid", "avoid_only"])
        sp.add_argument("--epsilon", type=float, help="critic-filter threshold")
        return sp

    sp = common(sub.add_parser("dp-solve", help="tabular reach-avoid value iteration"))
    sp.add_argument("--dp-horizon", type=int, help="number of backups (finite mode)")
    sp.add_argument("--points", type=int, help="grid points per axis")
    sp.set_defaults(func=cmd_dp_solve)

    sp = common(sub.add_parser("train", help="self-play training of critic, controller and adversary"))
    sp.add_argument("--steps", type=int, help="total environment steps")
    sp.add_argument("--objective", choices=["reach_avoid", "reward"])
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.add_argument("--compare-reward", action="store_true",
                    help="also train the sparse-reward baseline and write violation_curves.csv")
    sp.add_argument("--reward-players", choices=["adversarial", "single"], default="adversarial")
    sp.set_defaults(func=cmd_train)

    sp = filt(common(sub.add_parser("sweep-horizon", help="filter metrics across monitor horizons")))
    sp.add_argument("--horizons", type=_int_list, help="comma-separated horizons")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--episode-len", type=int)
    sp.add_argument("--adversary", help="policy JSON to use instead of training a stress-test adversary")
    sp.add_argument("--bust-steps", type=int, help="training steps for the stress-test adversary")
    sp.set_defaults(func=cmd_sweep_horizon)

    sp = filt(common(sub.add_parser("sweep-epsilon", help="critic-filter threshold sweep")))
    sp.add_argument("--epsilons", type=_float_list, help="comma-separated thresholds (inf allowed)")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--episode-len", type=int)
    sp.add_argument("--adversary", help="learned, rnd, rnd+ or a policy JSON")
    sp.set_defaults(func=cmd_sweep_epsilon)

    sp = filt(common(sub.add_parser("bust", help="stress-test matrix of control schemes versus adversaries")))
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--episode-len", type=int)
    sp.add_argument("--bust-steps", type=int, help="training steps per stress-test adversary")
    sp.set_defaults(func=cmd_bust)

    sp = filt(common(sub.add_parser("run", help="filtered episodes with per-step logs")))
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--episode-len", type=int)
    sp.add_argument("--adversary", help="learned, rnd, rnd+ or a policy JSON")
    sp.add_argument("--scheme", choices=["gameplay", "critic", "none"])
    sp.add_argument("--via-service", action="store_true", help="ask a filter service for every decision")
    sp.add_argument("--bind", help="HOST:PORT of a running service (default: start one in-process)")
    sp.set_defaults(func=cmd_run)

    sp = filt(common(sub.add_parser("serve", help="serve filter decisions over TCP"), out_required=False))
    sp.add_argument("--bind", help="HOST:PORT to listen on")
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = apply_flags(load_config(args.config), args)
        env_from(cfg)
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure: report and exit 1
        log.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
