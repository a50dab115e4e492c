"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 3 and 4 train learners end to end and take tens of minutes.
"""
import time

import numpy as np
import pytest
import yaml

from bicnet import harness as H
from bicnet import nets
from bicnet.cli import main
from bicnet.envs import CombatEnv, GuessEnv
from bicnet.envs import combat as C
from bicnet.learner import Learner, evaluate, train
from bicnet.pgcheck import SmoothTinyEnv, pg_theorem_check
from bicnet.verify import grad_check_suite
from test_envs import oracle_global, oracle_local, random_pair


def test_criterion_1_gradients(report):
    t0 = time.perf_counter()
    suite = grad_check_suite(seed=0, n_agents=3, tol=1e-5, h=1e-5)
    elapsed = time.perf_counter() - t0
    ok = suite.ok and elapsed < 60
    report(1, ok, f"worst rel err {suite.worst:.2e} over {len(suite.reports)} checks (tol 1e-5), {elapsed:.1f}s")
    assert ok, suite.summary()


def test_criterion_2_policy_gradient(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(20):
        env = SmoothTinyEnv.random(rng, horizon=3, discount=0.9)
        worst = max(worst, pg_theorem_check(env, rng=np.random.default_rng([0, k])).max_rel_err)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    report(2, ok, f"worst rel err {worst:.2e} over 20 envs (tol 1e-4), {elapsed:.1f}s")
    assert ok


GUESS_CELLS = [(5, "bicnet"), (10, "bicnet"), (20, "bicnet"), (5, "ind"), (5, "commnet")]


@pytest.mark.slow
def test_criterion_3_guessing_game(report):
    t0 = time.perf_counter()
    err = {}
    for n, variant in GUESS_CELLS:
        err[n, variant] = float(H.guess_cell(n, variant, episodes=5000, eval_steps=10_000, seed=0,
                                             eval_seed=10_000).mean())
    elapsed = time.perf_counter() - t0
    checks = {
        "bicnet n=5 <= 1.0": err[5, "bicnet"] <= 1.0,
        "bicnet n=10 <= 2.0": err[10, "bicnet"] <= 2.0,
        "bicnet n=20 <= 6.0": err[20, "bicnet"] <= 6.0,
        "ind >= 5x bicnet (n=5)": err[5, "ind"] >= 5 * err[5, "bicnet"],
        "commnet within 3x of bicnet (n=5)": max(err[5, "commnet"], err[5, "bicnet"])
        <= 3 * min(err[5, "commnet"], err[5, "bicnet"]),
        "runtime <= 30 min": elapsed <= 1800,
    }
    cells = ", ".join(f"{v} n={n}: {e:.3f}" for (n, v), e in err.items())
    failed = [k for k, v in checks.items() if not v]
    report(3, not failed, f"{cells}; {elapsed / 60:.1f} min" + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


COMBAT_SEEDS = (0, 1, 2)
COMBAT_STEPS = 90_000


def combat_run(variant, seed):
    cfg = H.validate_config({"variant": variant, "seed": seed,
                             "train": {"episodes": 10 ** 6, "step_budget": COMBAT_STEPS}})
    env = H.make_env(cfg["env"], seed)
    _, learner = train(H.train_config(cfg), env, variant, net=H.net_config_for(env, cfg))
    return evaluate(learner.net, learner.actor_target, CombatEnv("3r_vs_1m"), 200, seed=10_000 + seed)


@pytest.mark.slow
def test_criterion_4_combat(report):
    t0 = time.perf_counter()
    env = CombatEnv("3r_vs_1m")
    random_net = H.net_config_for(env, H.validate_config({}))
    random_actor = Learner.create(random_net, np.random.default_rng(0)).actor
    random_win = evaluate(random_net, random_actor, env, 200, seed=10_000)["win_rate"]
    wins = {v: [combat_run(v, s)["win_rate"] for s in COMBAT_SEEDS] for v in ("bicnet", "ind")}
    elapsed = time.perf_counter() - t0
    b, i = np.array(wins["bicnet"]), np.array(wins["ind"])
    checks = {
        "bicnet win >= 0.8 (majority of seeds)": (b >= 0.8).sum() >= 2,
        "random init <= 0.2": random_win <= 0.2,
        "bicnet >= ind (majority of seeds)": (b >= i).sum() >= 2,
        "runtime <= 1 h": elapsed <= 3600,
    }
    failed = [k for k, v in checks.items() if not v]
    report(4, not failed, f"bicnet wins {b.tolist()}, ind wins {i.tolist()}, random {random_win:.3f} "
           f"({COMBAT_STEPS} steps/run); {elapsed / 60:.1f} min"
           + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


def test_criterion_5_reward_oracles(report):
    rng = np.random.default_rng(0)
    worst, zero_sum = 0.0, True
    for _ in range(10_000):
        n, m, k = int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(1, 8))
        s, s2 = random_pair(rng, n, m)
        g = C.reward_global(s, s2)
        worst = max(worst, abs(g - oracle_global(s.hp, s2.hp, s.max_hp, n)))
        zero_sum &= g + C.reward_global_enemy(s, s2) == 0.0
        for i in range(n):
            if s.alive[i]:
                want = oracle_local(s.pos.tolist(), s.alive, s.hp, s2.hp, s.max_hp, n, i, k)
                worst = max(worst, abs(C.reward_local(s, s2, i, k) - want))
    ok = worst <= 1e-12 and zero_sum
    report(5, ok, f"max |reward - oracle| {worst:.1e} on 10000 pairs; zero-sum exact: {zero_sum}")
    assert ok


def test_criterion_6_scaling(report, tmp_path):
    cfg = H.validate_config({"env": {"slots": [10, 1], "t_max": 40}, "train": {"episodes": 5}})
    H.run_training(cfg, tmp_path)
    ck = H.load_checkpoint(tmp_path / "checkpoint.bin")
    big = CombatEnv("10r_vs_1m", slots=(10, 1), seed=1)
    metrics = H.evaluate_checkpoint(ck, big, 3)
    shared, local = big.reset()
    acts = nets.actor_forward(H.eval_net(ck.net, big), ck.actor, shared, local)
    ok = acts.shape == (10, 3) and bool(np.isfinite(acts).all()) and np.isfinite(metrics["mean_return"])
    report(6, ok, f"N=3 checkpoint evaluated at N=10: actions {acts.shape}, mean return "
           f"{metrics['mean_return']:.3f}")
    assert ok


def test_criterion_7_determinism(report, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"env": {"t_max": 40}, "train": {"episodes": 4}}))
    for name in ("a", "b"):
        main(["train", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name)])
    same_csv = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    env = CombatEnv("3r_vs_1m")
    learner = Learner.create(H.net_config_for(env, H.validate_config({})), np.random.default_rng(3))
    ck = H.parse_checkpoint(H.checkpoint_bytes(learner))
    rng = np.random.default_rng(4)
    shared = rng.normal(size=(100, env.shared_dim))
    local = rng.normal(size=(100, 3, env.local_dim))
    same_actions = (nets.actor_forward(learner.net, learner.actor, shared, local).tobytes()
                    == nets.actor_forward(ck.net, ck.actor, shared, local).tobytes())
    ok = same_csv and same_actions
    report(7, ok, f"identical CSVs: {same_csv}; bit-exact greedy actions after reload: {same_actions}")
    assert ok
