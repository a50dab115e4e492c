"""Train bicnet and ind on 3r_vs_1m for several seeds under one env-step budget.

Writes one row per (variant, seed) with the greedy win rate over held-out
episodes, plus the random-init baseline.

    python scripts/combat_experiment.py --steps 90000 --seeds 0,1,2 --out runs/combat.csv
"""
import argparse
import csv
import time
from pathlib import Path

import numpy as np

from bicnet import harness as H
from bicnet.envs import CombatEnv
from bicnet.learner import Learner, evaluate, train


def run(variant: str, seed: int, steps: int, episodes: int, overrides: list[str]) -> dict:
    cfg = H.deep_merge({"variant": variant, "seed": seed,
                        "train": {"episodes": 10 ** 6, "step_budget": steps}},
                       H.parse_assignments(overrides))
    cfg = H.validate_config(cfg)
    env = H.make_env(cfg["env"], seed)
    t0 = time.perf_counter()
    log, learner = train(H.train_config(cfg), env, variant, net=H.net_config_for(env, cfg))
    test_env = H.make_env(cfg["env"], seed)
    m = evaluate(learner.net, learner.actor_target, test_env, episodes, seed=10_000 + seed)
    return {"variant": variant, "seed": seed, "steps": sum(r["steps"] for r in log.rows),
            "train_episodes": len(log.rows), "win_rate": m["win_rate"],
            "mean_return": round(m["mean_return"], 6), "minutes": round((time.perf_counter() - t0) / 60, 2)}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=90_000)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--variants", default="bicnet,ind")
    ap.add_argument("--eval-episodes", type=int, default=200)
    ap.add_argument("--set", dest="assign", action="append", default=[], metavar="KEY.PATH=VALUE")
    ap.add_argument("--out", default="runs/combat.csv")
    args = ap.parse_args()

    cfg = H.validate_config(H.parse_assignments(args.assign))
    env = H.make_env(cfg["env"], 0)
    net = H.net_config_for(env, cfg)
    rand = evaluate(net, Learner.create(net, np.random.default_rng(0)).actor, env, args.eval_episodes, seed=10_000)
    rows = [{"variant": "random-init", "seed": 0, "steps": 0, "train_episodes": 0,
             "win_rate": rand["win_rate"], "mean_return": round(rand["mean_return"], 6), "minutes": 0}]
    print(rows[0], flush=True)
    for seed in (int(s) for s in args.seeds.split(",")):
        for variant in args.variants.split(","):
            rows.append(run(variant, seed, args.steps, args.eval_episodes, args.assign))
            print(rows[-1], flush=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
