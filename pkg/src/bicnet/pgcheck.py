"""Numerical check of the multiagent deterministic policy gradient.

On a tiny deterministic two-agent system the exact objective
``J(theta) = sum_t lam^t sum_i r_i`` is differentiated by central differences
and compared with the estimator

    sum_t lam^t sum_i sum_j grad_theta a_j(s_t) . grad_{a_j} Q_i(s_t, a(s_t))

where ``Q_i`` is the exact truncated return obtained by rolling the system
forward from ``(s_t, a)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Tape, Var
from .nets import NetConfig


@dataclass
class SmoothTinyEnv:
    """1-d state, N scalar actions, smooth rewards and transition.

    r_i(s, a) = -c_i (a_i - g_i s - h_i)^2 + k_i a_1 a_2 + m_i tanh(s)
    s'        = tanh(alpha s + sum_j beta_j a_j)
    """

    c: np.ndarray
    g: np.ndarray
    h: np.ndarray
    k: np.ndarray
    m: np.ndarray
    alpha: float
    beta: np.ndarray
    s0: float = 0.3
    horizon: int = 3
    discount: float = 0.9
    smooth: bool = True
    n_agents: int = 2

    @classmethod
    def random(cls, rng: np.random.Generator, horizon: int = 3, discount: float = 0.9) -> "SmoothTinyEnv":
        n = 2
        return cls(
            c=rng.uniform(0.5, 1.5, n), g=rng.normal(0, 1, n), h=rng.normal(0, 0.5, n),
            k=rng.normal(0, 0.5, n), m=rng.normal(0, 1, n), alpha=float(rng.uniform(0.3, 1.2)),
            beta=rng.normal(0, 0.7, n), s0=float(rng.uniform(-1, 1)), horizon=horizon, discount=discount,
        )

    def rewards(self, s: Var, a: list[Var]) -> list[Var]:
        prod = a[0] * a[1]
        ts = ad.tanh(s)
        out = []
        for i in range(self.n_agents):
            dev = a[i] - (s * float(self.g[i]) + np.array([[self.h[i]]]))
            out.append(ad.square(dev) * float(-self.c[i]) + prod * float(self.k[i]) + ts * float(self.m[i]))
        return out

    def transition(self, s: Var, a: list[Var]) -> Var:
        z = s * self.alpha
        for j in range(self.n_agents):
            z = z + a[j] * float(self.beta[j])
        return ad.tanh(z)


@dataclass
class NonSmoothTinyEnv(SmoothTinyEnv):
    """Same system with a kinked transition; violates the regularity assumptions."""

    smooth: bool = False

    def transition(self, s: Var, a: list[Var]) -> Var:
        z = s * self.alpha
        for j in range(self.n_agents):
            z = z + a[j] * float(self.beta[j])
        return ad.relu(z)


def tiny_actor_config(rnn_hidden: int = 3) -> NetConfig:
    return NetConfig(shared_dim=1, local_dim=1, action_dim=1, embed_hidden=(4,),
                     rnn_hidden=rnn_hidden, head_hidden=(4,), comm="birnn")


def _obs(env: SmoothTinyEnv, s: float):
    shared = np.array([[s]])
    local = np.array([[[0.5 * (j + 1)] for j in range(env.n_agents)]])
    return shared, local


def _actions(cfg, pv, env, s_val: float, tape: Tape) -> list[Var]:
    shared, local = _obs(env, s_val)
    return nets.net_graph(cfg, pv, shared, local, tape).values


def objective(cfg: NetConfig, params, env: SmoothTinyEnv) -> float:
    """Exact discounted return J(theta) by deterministic rollout."""
    tape = Tape()
    pv = nets.bind(tape, params, trainable=False)
    s = tape.constant([[env.s0]])
    total = 0.0
    for t in range(env.horizon):
        a = _actions(cfg, pv, env, float(s.value[0, 0]), tape)
        r = env.rewards(s, a)
        total += env.discount ** t * sum(float(ri.value[0, 0]) for ri in r)
        s = env.transition(s, a)
    return total


def rollout_states(cfg: NetConfig, params, env: SmoothTinyEnv) -> list[float]:
    tape = Tape()
    pv = nets.bind(tape, params, trainable=False)
    s = tape.constant([[env.s0]])
    states = []
    for _ in range(env.horizon):
        states.append(float(s.value[0, 0]))
        a = _actions(cfg, pv, env, states[-1], tape)
        s = env.transition(s, a)
    return states


def q_action_grads(cfg: NetConfig, params, env: SmoothTinyEnv, s_t: float, a_t: np.ndarray,
                   steps_left: int) -> np.ndarray:
    """G[i, j] = d Q_i / d a_j at (s_t, a_t), Q_i the exact truncated return."""
    n = env.n_agents
    G = np.zeros((n, n))
    for i in range(n):
        tape = Tape()
        pv = nets.bind(tape, params, trainable=False)
        a = [tape.constant([[a_t[j]]]) for j in range(n)]
        s = tape.constant([[s_t]])
        q = env.rewards(s, a)[i]
        s = env.transition(s, a)
        for k in range(1, steps_left):
            # later actions depend on the perturbed state, so s stays a graph node
            ak = _actor_on_var(cfg, pv, env, s, tape)
            q = q + env.rewards(s, ak)[i] * (env.discount ** k)
            s = env.transition(s, ak)
        grads = ad.grad_wrt(tape, ad.sum_(q), a)
        G[i] = [g[0, 0] for g in grads]
    return G


def _actor_on_var(cfg: NetConfig, pv, env: SmoothTinyEnv, s: Var, tape: Tape) -> list[Var]:
    """Actor evaluated on a state that is itself a tape node."""
    n = env.n_agents
    rows = []
    for j in range(n):
        rows.append(ad.concat([s, tape.constant([[0.5 * (j + 1)]])], axis=1))
    x = ad.concat(rows, axis=0)  # (n, 2): agent j's [shared, local] row
    E = x
    for k in range(len(cfg.embed_hidden)):
        E = ad.relu(E @ pv[f"t0/embed{k}/W"] + pv[f"t0/embed{k}/b"])
    emb = [ad.slice_(E, 0, j, j + 1) for j in range(n)]
    hf, hb = [None] * n, [None] * n
    for j in range(n):
        p = emb[j] @ pv["t0/rnn_fwd/Wx"] + pv["t0/rnn_fwd/b"]
        if j > 0:
            p = p + hf[j - 1] @ pv["t0/rnn_fwd/Wh"]
        hf[j] = ad.tanh(p)
    for j in range(n - 1, -1, -1):
        p = emb[j] @ pv["t0/rnn_bwd/Wx"] + pv["t0/rnn_bwd/b"]
        if j < n - 1:
            p = p + hb[j + 1] @ pv["t0/rnn_bwd/Wh"]
        hb[j] = ad.tanh(p)
    out = []
    for j in range(n):
        h = ad.concat([emb[j], hf[j], hb[j]], axis=1)
        for k in range(len(cfg.head_hidden)):
            h = ad.relu(h @ pv[f"t0/head{k}/W"] + pv[f"t0/head{k}/b"])
        out.append(h @ pv["t0/out/W"] + pv["t0/out/b"])
    return out


def policy_gradient_estimate(cfg: NetConfig, params, env: SmoothTinyEnv) -> dict[str, np.ndarray]:
    """sum_t lam^t sum_i sum_j grad_theta a_j(s_t) . grad_{a_j} Q_i(s_t, a(s_t))."""
    states = rollout_states(cfg, params, env)
    total = {k: np.zeros_like(v) for k, v in params.items()}
    for t, s_t in enumerate(states):
        tape = Tape()
        pv = nets.bind(tape, params)
        a = _actions(cfg, pv, env, s_t, tape)
        a_val = np.array([float(x.value[0, 0]) for x in a])
        G = q_action_grads(cfg, params, env, s_t, a_val, env.horizon - t)
        for i in range(env.n_agents):
            for j in range(env.n_agents):
                if G[i, j] == 0.0:
                    continue
                # grad_theta a_j scaled by the action sensitivity of Q_i
                grads = ad.backward(tape, ad.sum_(a[j]))
                for k in total:
                    total[k] += env.discount ** t * G[i, j] * grads[k]
    return total


def finite_difference_gradient(cfg: NetConfig, params, env: SmoothTinyEnv, h: float = 1e-5
                               ) -> dict[str, np.ndarray]:
    out = {}
    for name, base in params.items():
        g = np.zeros_like(base)
        for ix in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                p = dict(params)
                arr = base.copy()
                arr[ix] += sign * h
                p[name] = arr
                vals.append(objective(cfg, p, env))
            g[ix] = (vals[0] - vals[1]) / (2 * h)
        out[name] = g
    return out


@dataclass
class PGCheckResult:
    max_rel_err: float
    per_param: dict = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def pg_theorem_check(env: SmoothTinyEnv, params=None, horizon: int | None = None, cfg: NetConfig | None = None,
                     rng: np.random.Generator | None = None, h: float = 1e-5) -> PGCheckResult:
    if not getattr(env, "smooth", False):
        raise ValueError("policy gradient check needs a smooth environment (bounded, differentiable "
                         "reward and transition)")
    if horizon is not None:
        env = _with_horizon(env, horizon)
    if env.horizon < 1 or env.horizon > 5:
        raise ValueError("horizon must be between 1 and 5")
    cfg = cfg or tiny_actor_config()
    if cfg.comm != "birnn" or cfg.obs_scale != 1.0 or cfg.action_scale != 1.0 or cfg.action_low:
        raise ValueError("pg check expects an unscaled, unbounded birnn actor")
    if params is None:
        rng = rng or np.random.default_rng(0)
        params = nets.init_params(cfg, "actor", rng)
        # the default output init is tiny; widen it so actions matter
        params["t0/out/W"] = rng.normal(0, 0.5, params["t0/out/W"].shape)
        # zero biases can park relu units exactly on their kink; random ones do not
        for k in params:
            if k.endswith("/b"):
                params[k] = rng.normal(0, 0.3, params[k].shape)
    est = policy_gradient_estimate(cfg, params, env)
    fd = finite_difference_gradient(cfg, params, env, h)
    per = {k: float(ad.rel_error(est[k], fd[k]).max()) for k in params}
    return PGCheckResult(max(per.values()), per)


def _with_horizon(env: SmoothTinyEnv, horizon: int) -> SmoothTinyEnv:
    from dataclasses import replace
    return replace(env, horizon=horizon)
