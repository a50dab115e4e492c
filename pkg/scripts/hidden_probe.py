"""Hidden-state probe on the guessing game with a one-unit recurrent channel.

Trains bicnet on n = 3, logs the forward and backward hidden values during
greedy evaluation, and reports the rank correlation between the sum of the
inputs and the last agent's forward hidden value.  Writes a CSV with one row
per test step for external plotting.

    python scripts/hidden_probe.py --out runs/hidden
"""
import argparse
import csv
import json
from pathlib import Path

import numpy as np
import yaml

from bicnet.cli import main as cli


def ranks(x):
    r = np.empty(len(x))
    r[np.argsort(x, kind="stable")] = np.arange(len(x))
    return r


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--episodes", type=int, default=1500)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/hidden")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "config.in.yaml"
    cfg.write_text(yaml.safe_dump({"env": {"kind": "guess", "n": 3},
                                   "net": {"rnn_hidden": 1, "critic_rnn_hidden": 32},
                                   "train": {"episodes": args.episodes}}))
    cli(["train", "--config", str(cfg), "--seed", str(args.seed), "--out", str(out / "train")])
    log = out / "hidden.jsonl"
    cli(["eval", "--checkpoint", str(out / "train" / "checkpoint.bin"), "--episodes", str(args.steps),
         "--hidden-log", str(log), "--out", str(out / "eval")])

    recs = [json.loads(line) for line in log.read_text().splitlines()]
    with open(out / "hidden.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x1", "x2", "x3", "sum", "fwd1", "fwd2", "fwd3", "bwd1", "bwd2", "bwd3"])
        for r in recs:
            xs = [x[0] for x in r["inputs"]]
            w.writerow([*xs, sum(xs), *(h[0] for h in r["fwd"]), *(h[0] for h in r["bwd"])])
    total = np.array([sum(x[0] for x in r["inputs"]) for r in recs])
    final = np.array([r["fwd"][-1][0] for r in recs])
    rho = np.corrcoef(ranks(total), ranks(final))[0, 1]
    print(f"rank correlation(sum of inputs, last forward hidden) = {rho:+.4f} over {len(recs)} steps")


if __name__ == "__main__":
    main()
