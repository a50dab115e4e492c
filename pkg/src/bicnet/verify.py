"""Gradient verification suite: every op kind plus full actor and critic passes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import GradCheckReport
from .nets import NetConfig


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(0, 1, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


def op_cases(rng: np.random.Generator) -> dict:
    """kind -> (fn, params); each fn reduces the op output with fixed random weights."""
    def weighted(out_shape):
        w = rng.normal(0, 1, out_shape)
        return lambda tape, y: ad.sum_(ad.mul(y, tape.constant(w)))

    cases = {}

    def case(kind, params, op, out_shape):
        red = weighted(out_shape)
        cases[kind] = (lambda tape, v: red(tape, op(v)), params)

    case("add", {"a": rng.normal(0, 1, (2, 3, 4)), "b": rng.normal(0, 1, (4,))},
         lambda v: ad.add(v["a"], v["b"]), (2, 3, 4))
    case("sub", {"a": rng.normal(0, 1, (3, 4)), "b": rng.normal(0, 1, (3, 4))},
         lambda v: ad.sub(v["a"], v["b"]), (3, 4))
    case("mul", {"a": rng.normal(0, 1, (3, 4)), "b": rng.normal(0, 1, (4,))},
         lambda v: ad.mul(v["a"], v["b"]), (3, 4))
    case("scale", {"a": rng.normal(0, 1, (5,))}, lambda v: ad.scale(v["a"], -1.7), (5,))
    case("matmul", {"a": rng.normal(0, 1, (2, 3, 4)), "b": rng.normal(0, 1, (4, 5))},
         lambda v: ad.matmul(v["a"], v["b"]), (2, 3, 5))
    case("concat", {"a": rng.normal(0, 1, (2, 3)), "b": rng.normal(0, 1, (2, 2))},
         lambda v: ad.concat([v["a"], v["b"]], axis=1), (2, 5))
    case("slice", {"a": rng.normal(0, 1, (3, 5))}, lambda v: ad.slice_(v["a"], 1, 1, 4), (3, 3))
    case("sum", {"a": rng.normal(0, 1, (2, 3, 4))}, lambda v: ad.sum_(v["a"], axis=1), (2, 4))
    case("mean", {"a": rng.normal(0, 1, (3, 4))}, lambda v: ad.mean(v["a"], axis=0), (4,))
    case("square", {"a": rng.normal(0, 1, (3, 4))}, lambda v: ad.square(v["a"]), (3, 4))
    case("tanh", {"a": rng.normal(0, 1.5, (3, 4))}, lambda v: ad.tanh(v["a"]), (3, 4))
    case("sigmoid", {"a": rng.normal(0, 3, (3, 4))}, lambda v: ad.sigmoid(v["a"]), (3, 4))
    case("relu", {"a": _away_from_zero(rng, (3, 4))}, lambda v: ad.relu(v["a"]), (3, 4))
    return cases


def small_net_config(comm: str = "birnn", n_agents: int = 3) -> NetConfig:
    """A combat-shaped net, small enough for entrywise finite differences."""
    return NetConfig(shared_dim=6, local_dim=4, action_dim=3, embed_hidden=(8,), rnn_hidden=5,
                     head_hidden=(6,), comm=comm, n_agents=n_agents if comm == "fully-connected" else None,
                     action_low=(0.0, -np.pi, 0.0), action_high=(1.0, np.pi, 10.0))


def net_cases(rng: np.random.Generator, n_agents: int = 3, comm: str = "birnn") -> dict:
    cfg = small_net_config(comm, n_agents)
    B = 2
    shared = rng.normal(0, 1, (B, cfg.shared_dim))
    local = rng.normal(0, 1, (B, n_agents, cfg.local_dim))
    low, high = cfg.bounds()
    actions = rng.uniform(low, high, (B, n_agents, cfg.action_dim))
    w_act = rng.normal(0, 1, (n_agents, B, cfg.action_dim))
    w_q = rng.normal(0, 1, (n_agents, B, 1))
    actor = nets.init_params(cfg, "actor", rng)
    critic = nets.init_params(cfg, "critic", rng)
    # widen the tiny output init so every path carries signal
    for p in (actor, critic):
        for k in p:
            if k.endswith("/out/W"):
                p[k] = rng.normal(0, 0.5, p[k].shape)

    def actor_fn(tape, v):
        out = nets.net_graph(cfg, v, shared, local, tape).values
        return _weighted_total(tape, out, w_act)

    def critic_fn(tape, v):
        acts = [v[f"action{i}"] for i in range(n_agents)]
        pv = {k: v[k] for k in critic}
        out = nets.net_graph(cfg, pv, shared, local, tape, actions=acts).values
        return _weighted_total(tape, out, w_q)

    critic_params = dict(critic)
    for i in range(n_agents):
        critic_params[f"action{i}"] = actions[:, i, :]
    return {f"{comm}-actor": (actor_fn, actor), f"{comm}-critic": (critic_fn, critic_params)}


def _weighted_total(tape, values, weights):
    total = ad.sum_(ad.mul(values[0], tape.constant(weights[0])))
    for v, w in zip(values[1:], weights[1:]):
        total = ad.add(total, ad.sum_(ad.mul(v, tape.constant(w))))
    return total


@dataclass
class SuiteReport:
    reports: dict
    tol: float

    @property
    def ok(self) -> bool:
        return all(r.worst < self.tol and not r.nonfinite for r in self.reports.values())

    @property
    def worst(self) -> float:
        return max(r.worst for r in self.reports.values())

    def summary(self) -> str:
        lines = [f"{name:<22} max rel err {r.worst:.3e}  {'ok' if r.worst < self.tol else 'FAIL'}"
                 for name, r in self.reports.items()]
        lines.append(f"{'PASS' if self.ok else 'FAIL'}: worst {self.worst:.3e} (tol {self.tol:g})")
        return "\n".join(lines)


def grad_check_suite(seed: int = 0, n_agents: int = 3, tol: float = 1e-5, h: float = 1e-5,
                     comms=nets.COMM_MODES) -> SuiteReport:
    rng = np.random.default_rng(seed)
    reports: dict[str, GradCheckReport] = {}
    for kind, (fn, params) in op_cases(rng).items():
        reports[kind] = ad.grad_check(fn, params, h=h, tol=tol)
    for comm in comms:
        for name, (fn, params) in net_cases(rng, n_agents, comm).items():
            reports[name] = ad.grad_check(fn, params, h=h, tol=tol)
    return SuiteReport(reports, tol)
