"""Command line entry point: ``python -m bicnet <command> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .learner import VARIANTS


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML config file; flags below override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--set", dest="assign", action="append", default=[], metavar="KEY.PATH=VALUE",
                   help="override any config entry, e.g. train.episodes=50 (repeatable)")


def _merged(args, extra: dict | None = None) -> dict:
    cfg = H.load_config_file(args.config) if args.config else {}
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if getattr(args, "variant", None):
        flags["variant"] = args.variant
    cfg = H.deep_merge(cfg, flags)
    cfg = H.deep_merge(cfg, H.parse_assignments(args.assign))
    if extra:
        cfg = H.deep_merge(cfg, extra)
    return H.validate_config(cfg)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bicnet", description="Multiagent bidirectional actor-critic runs.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a learner; writes metrics CSV, checkpoint and manifest")
    _add_overrides(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", help="output directory (default: config 'out')")

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    _add_overrides(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", help="evaluate on another scenario (N may differ)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--actor", choices=("target", "online"))
    p.add_argument("--hidden-log", help="write per-step forward/backward hidden states as JSONL")
    p.add_argument("--out", default="runs/eval")

    p = sub.add_parser("guess-table", help="guessing-game error table over agent counts and variants")
    p.add_argument("--agents", default="5,10,20")
    p.add_argument("--variants", default="bicnet,commnet,ind",
                   help="comma list of learner variants; sl-mlp adds the supervised ceiling")
    p.add_argument("--episodes", type=int, default=5000)
    p.add_argument("--eval-steps", type=int, default=10_000)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/guess_table.csv")

    p = sub.add_parser("grad-check", help="finite-difference verification of every op and network")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--agents", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--out", default="runs/grad-check")

    p = sub.add_parser("pg-check", help="policy gradient estimator vs finite differences of the return")
    p.add_argument("--envs", type=int, default=20)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--discount", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", default="runs/pg-check")

    p = sub.add_parser("replay-dump", help="JSONL replay of one greedy episode")
    _add_overrides(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario")
    p.add_argument("--actor", choices=("target", "online"))
    p.add_argument("--out", default="runs/replay.jsonl")
    return ap


def _eval_setup(args):
    ckpt = H.load_checkpoint(args.checkpoint)
    extra = {"env": dict(ckpt.meta.get("env", {})), "variant": ckpt.variant}
    base = H.load_config_file(args.config) if args.config else {}
    extra = H.deep_merge(extra, base)
    if args.scenario:
        extra["env"]["scenario"] = args.scenario
    if getattr(args, "episodes", None) is not None:
        extra.setdefault("eval", {})["episodes"] = args.episodes
    if args.actor:
        extra.setdefault("eval", {})["actor"] = args.actor
    args.config = None
    cfg = _merged(args, extra)
    seed = int(cfg["eval"]["seed"]) if args.seed is None else int(args.seed)
    env = H.make_env(cfg["env"], seed)
    H.check_compatible(ckpt.net, env)
    return ckpt, cfg, env, seed


def cmd_train(args) -> int:
    extra = {}
    if args.episodes is not None:
        extra["train"] = {"episodes": args.episodes}
    cfg = _merged(args, extra)
    out = Path(args.out or cfg["out"])
    print(json.dumps({"config": cfg}, sort_keys=True))
    result = H.run_training(cfg, out)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    ckpt, cfg, env, seed = _eval_setup(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    H.echo_config(out, cfg)
    H.write_manifest(out, cfg, "eval", {"eval": seed})
    metrics = H.evaluate_checkpoint(ckpt, env, int(cfg["eval"]["episodes"]), cfg["eval"]["actor"])
    if args.hidden_log:
        net = H.eval_net(ckpt.net, env)
        params = ckpt.params["actor_target" if cfg["eval"]["actor"] == "target" else "actor"]
        env.rng = np.random.default_rng(seed + 1)
        H.write_jsonl(args.hidden_log, H.rollout(net, params, env, int(cfg["eval"]["episodes"]), hidden=True))
    (out / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_guess_table(args) -> int:
    spec = H.GuessTableSpec(agents=tuple(int(a) for a in args.agents.split(",")),
                            variants=tuple(v.strip() for v in args.variants.split(",")),
                            episodes=args.episodes, eval_steps=args.eval_steps,
                            repetitions=args.repetitions, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows, stats = H.guess_table(spec, progress=lambda n, v, r, e: print(
        f"n={n} {v} rep {r}: mean abs error {e:.4f}", file=sys.stderr))
    H.write_table(out, rows, ["agents", *spec.variants])
    stats_path = out.with_name(out.stem + "_ttest.csv")
    H.write_table(stats_path, stats, ["agents", "best", "second", "t_statistic"])
    cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in vars(spec).items()}
    man = {"command": "guess-table", "config_hash": H.config_hash(cfg), "seeds": {"table": spec.seed},
           "build": H.build_id(), "config": cfg}
    out.with_name(out.stem + "_manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    print(out.read_text(), end="")
    return 0


def cmd_grad_check(args) -> int:
    from .verify import grad_check_suite
    report = grad_check_suite(seed=args.seed, n_agents=args.agents, tol=args.tol)
    text = report.summary()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text + "\n")
    cfg = {"seed": args.seed, "agents": args.agents, "tol": args.tol}
    H.write_manifest(out, cfg, "grad-check", {"check": args.seed})
    print(text)
    return 0 if report.ok else 1


def cmd_pg_check(args) -> int:
    from .pgcheck import SmoothTinyEnv, pg_theorem_check
    rng = np.random.default_rng(args.seed)
    lines, worst = [], 0.0
    for k in range(args.envs):
        env = SmoothTinyEnv.random(rng, horizon=args.horizon, discount=args.discount)
        res = pg_theorem_check(env, rng=np.random.default_rng([args.seed, k]))
        worst = max(worst, res.max_rel_err)
        lines.append(f"env {k:2d}: max rel err {res.max_rel_err:.3e}")
    ok = worst < args.tol
    lines.append(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} over {args.envs} envs (tol {args.tol:g})")
    text = "\n".join(lines)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text + "\n")
    cfg = {k: getattr(args, k) for k in ("envs", "horizon", "discount", "seed", "tol")}
    H.write_manifest(out, cfg, "pg-check", {"check": args.seed})
    print(text)
    return 0 if ok else 1


def cmd_replay_dump(args) -> int:
    args.episodes = 1
    ckpt, cfg, env, seed = _eval_setup(args)
    net = H.eval_net(ckpt.net, env)
    params = ckpt.params["actor_target" if cfg["eval"]["actor"] == "target" else "actor"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = H.write_jsonl(out, H.rollout(net, params, env, 1, replay=True))
    man_dir = out.with_name(out.stem + "_run")
    man_dir.mkdir(exist_ok=True)
    H.echo_config(man_dir, cfg)
    H.write_manifest(man_dir, cfg, "replay-dump", {"eval": seed})
    print(json.dumps({"replay": str(out), "steps": n}))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "guess-table": cmd_guess_table,
            "grad-check": cmd_grad_check, "pg-check": cmd_pg_check, "replay-dump": cmd_replay_dump}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"bicnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
