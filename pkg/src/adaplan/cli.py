"""Command line entry points: data generation, training, evaluation and sweeps.

Every subcommand takes ``--config <json>`` with optional sections ``env``,
``datagen``, ``diffuser``, ``invdyn``, ``planner`` and ``eval``; command-line
flags override the matching config values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench, datagen, diffuser, invdyn, planner
from .dynalanes import EnvConfig

DEFAULTS = {
    "env": {},
    "datagen": {"steps": 100_000, "noise": 0.1, "seed": 0},
    "diffuser": {"horizon": 16, "steps": 20_000, "batch": 256, "lr": 1e-3, "hidden": list(diffuser.HIDDEN),
                 "K": 100, "seed": 0},
    "invdyn": {"members": 5, "hidden": list(invdyn.HIDDEN), "steps": 4000, "batch": 256, "lr": 1e-3, "seed": 0},
    "planner": {"epsilon": 0.1, "mode": "adaptive"},
    "eval": {"episodes": 50, "seed": 0, "calibration_seeds": list(range(10_000, 10_010)), "percentile": 70.0,
             "workers": 1},
}


def load_config(path) -> dict:
    """Defaults overlaid with the JSON file at ``path`` (unknown keys rejected)."""
    cfg = {k: dict(v) for k, v in DEFAULTS.items()}
    if path is None:
        return cfg
    user = json.loads(Path(path).read_text())
    for section, values in user.items():
        if section not in cfg:
            raise ValueError(f"unknown config section {section!r}")
        if section != "env":
            bad = set(values) - set(cfg[section])
            if bad:
                raise ValueError(f"unknown keys in [{section}]: {sorted(bad)}")
        cfg[section].update(values)
    EnvConfig.from_dict(cfg["env"])
    return cfg


def _override(section: dict, **flags) -> dict:
    return {**section, **{k: v for k, v in flags.items() if v is not None}}


def cmd_gen_data(args, cfg) -> None:
    dg = _override(cfg["datagen"], steps=args.steps, seed=args.seed, noise=args.noise)
    env = EnvConfig.from_dict(cfg["env"])
    ds = datagen.collect(env, datagen.BehaviorPolicy(dg["noise"]), dg["steps"], dg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datagen.write_dataset(out / "dataset.jsonl", ds)
    datagen.norm_stats(ds).save(out / "norm_stats.json")
    print(f"{len(ds)} transitions, {ds.n_episodes} episodes, collision rate {ds.collision_rate():.3f} -> {out}")


def cmd_train_diffuser(args, cfg) -> None:
    dc = _override(cfg["diffuser"], steps=args.steps, seed=args.seed)
    ds = datagen.read_dataset(args.data)
    stats = datagen.norm_stats(ds)

    def log(step, loss):
        print(f"step {step} loss {loss:.4f}", flush=True)

    model, sched, _ = diffuser.train_diffuser(ds, stats, dc["horizon"], dc["steps"], dc["batch"], dc["seed"],
                                              dc["lr"], tuple(dc["hidden"]), dc["K"], log_every=args.log_every,
                                              callback=log)
    diffuser.save_denoiser(args.out, model, sched, seed=dc["seed"], meta={"steps": dc["steps"]})
    print(f"denoiser -> {args.out}")


def cmd_train_invdyn(args, cfg) -> None:
    ic = _override(cfg["invdyn"], members=args.members, seed=args.seed)
    ds = datagen.read_dataset(args.data)
    stats = datagen.norm_stats(ds)
    ens = invdyn.train_ensemble(ds, stats, ic["members"], ic["seed"], hidden=tuple(ic["hidden"]),
                                steps=ic["steps"], batch=ic["batch"], lr=ic["lr"])
    invdyn.save_ensemble(args.out, ens)
    print(f"{ens.size}-member ensemble -> {args.out}")


def _load_models(args):
    model, sched = diffuser.load_denoiser(args.diffuser)
    return diffuser.DiffusionPlanner(model, sched), invdyn.load_ensemble(args.ensemble)


def _resolve_epsilon(args, cfg, env, plan_src, ens) -> float:
    if args.epsilon is not None:
        return args.epsilon
    ev = cfg["eval"]
    if args.calibrate:
        return bench.calibrate_epsilon(env, plan_src, ens, ev["calibration_seeds"], ev["percentile"], ev["workers"])
    return cfg["planner"]["epsilon"]


def cmd_eval(args, cfg) -> None:
    env = EnvConfig.from_dict(cfg["env"])
    ev = _override(cfg["eval"], episodes=args.episodes, seed=args.seed)
    plan_src, ens = _load_models(args)
    mode = args.mode or cfg["planner"]["mode"]
    modes = list(planner.MODES) if mode == "all" else [mode]
    eps = _resolve_epsilon(args, cfg, env, plan_src, ens)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, logs = [], []
    for m in modes:
        row, lg = bench.evaluate(env, plan_src, ens, planner.PlannerConfig(eps, m), ev["episodes"], ev["seed"],
                                 ev["workers"])
        rows.append(row)
        logs.extend(lg)
    planner.dump_logs(out / "logs.jsonl", logs)
    print(bench.report(rows, out))


def cmd_sweep(args, cfg) -> None:
    env = EnvConfig.from_dict(cfg["env"])
    ev = _override(cfg["eval"], episodes=args.episodes, seed=args.seed)
    plan_src, ens = _load_models(args)
    eps = [float(x) for x in args.epsilons.split(",")]
    rep, logs = bench.sweep(env, plan_src, ens, eps, ev["episodes"], ev["seed"], ev["workers"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    planner.dump_logs(out / "logs.jsonl", [lg for batch in logs for lg in batch])
    print(bench.report(rep, out, name="sweep"))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaplan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", required=True, help="output path")
        return sp

    g = common(sub.add_parser("gen-data", help="collect an offline driving dataset"))
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--noise", type=float, help="behaviour-policy noise level")
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train-diffuser", help="train the state-window denoiser"))
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", type=int, default=1000)
    t.set_defaults(func=cmd_train_diffuser)

    i = common(sub.add_parser("train-invdyn", help="train the inverse-dynamics ensemble"))
    i.add_argument("--data", required=True)
    i.add_argument("--members", type=int)
    i.add_argument("--seed", type=int)
    i.set_defaults(func=cmd_train_invdyn)

    for name, func, help_ in (("eval", cmd_eval, "evaluate one or all planner modes"),
                              ("sweep", cmd_sweep, "evaluate adaptive planning over several thresholds")):
        e = common(sub.add_parser(name, help=help_))
        e.add_argument("--diffuser", required=True, help="denoiser checkpoint")
        e.add_argument("--ensemble", required=True, help="ensemble directory")
        e.add_argument("--episodes", type=int)
        e.add_argument("--seed", type=int)
        if name == "eval":
            e.add_argument("--mode", choices=["adaptive", "continuous", "no-replan", "no_replan", "all"])
            e.add_argument("--epsilon", type=float)
            e.add_argument("--calibrate", action="store_true",
                           help="set epsilon from the entropy percentile of calibration rollouts")
        else:
            e.add_argument("--epsilons", required=True, help="comma-separated thresholds")
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args, load_config(args.config))
    except Exception as exc:  # report and fail instead of dumping a traceback
        print(f"adaplan {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
