"""Off-policy multiagent deterministic actor-critic training loop."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import AdamState, Tape
from .nets import NetConfig

VARIANTS = {
    "bicnet": "birnn",
    "ind": "none",
    "fc": "fully-connected",
    "commnet": "mean",
    "gmezo": "greedy-mdp",
}

METRIC_COLUMNS = ("episode", "steps", "return", "win", "critic_loss", "actor_grad_norm", "sigma", "wall_ms")


class TrainingDiverged(RuntimeError):
    pass


# -- exploration ---------------------------------------------------------

@dataclass
class OUProcess:
    """x <- x + theta*(mu - x)*dt + sigma*sqrt(dt)*eps, eps ~ N(0, 1)."""

    size: int
    theta: float = 0.15
    sigma: float = 0.2
    mu: float = 0.0
    dt: float = 1.0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    x: np.ndarray = None

    def __post_init__(self):
        if self.sigma < 0 or self.theta < 0:
            raise ValueError("sigma and theta must be non-negative")
        if self.x is None:
            self.reset()

    def reset(self):
        self.x = np.full(self.size, float(self.mu))

    def sample(self) -> np.ndarray:
        eps = self.rng.standard_normal(self.size)
        self.x = self.x + self.theta * (self.mu - self.x) * self.dt + self.sigma * math.sqrt(self.dt) * eps
        return self.x.copy()


def explore_action(cfg: NetConfig, actor_params, shared_obs, local_obs, ou: OUProcess,
                   noise_scale: np.ndarray | float = 1.0, agent_types=None) -> np.ndarray:
    """Greedy action plus OU noise, clamped back into the action box."""
    greedy = nets.actor_forward(cfg, actor_params, shared_obs, local_obs, agent_types=agent_types)
    noise = ou.sample().reshape(greedy.shape) * noise_scale
    low, high = cfg.bounds()
    return np.clip(greedy + noise, low, high)


def noise_scale_for(cfg: NetConfig, unbounded: float = 1.0) -> np.ndarray:
    low, high = cfg.bounds()
    finite = np.isfinite(low) & np.isfinite(high)
    return np.where(finite, 0.5 * (high - low), unbounded)


# -- replay --------------------------------------------------------------

@dataclass
class Transition:
    shared: np.ndarray
    local: np.ndarray       # (N, L)
    actions: np.ndarray     # (N, A)
    rewards: np.ndarray     # (N,)
    next_shared: np.ndarray
    next_local: np.ndarray
    done: bool


@dataclass
class Batch:
    shared: np.ndarray       # (M, S)
    local: np.ndarray        # (M, N, L)
    actions: np.ndarray      # (M, N, A)
    rewards: np.ndarray      # (M, N)
    next_shared: np.ndarray
    next_local: np.ndarray
    done: np.ndarray         # (M,) bool

    def __len__(self):
        return len(self.done)


class ReplayBuffer:
    """FIFO ring of transitions with uniform sampling (with replacement)."""

    _fields = ("shared", "local", "actions", "rewards", "next_shared", "next_local", "done")

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.size = 0
        self._next = 0
        self._store: dict[str, np.ndarray] | None = None

    def __len__(self):
        return self.size

    def push(self, tr: Transition):
        if self._store is None:
            self._store = {}
            for name in self._fields:
                v = np.asarray(getattr(tr, name), dtype=bool if name == "done" else float)
                self._store[name] = np.zeros((self.capacity, *v.shape), dtype=v.dtype)
        for name in self._fields:
            self._store[name][self._next] = getattr(tr, name)
        self._next = (self._next + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ready(self, batch_size: int) -> bool:
        return self.size >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch | None:
        """Uniform minibatch, or None when fewer than ``batch_size`` entries are stored."""
        if not self.ready(batch_size):
            return None
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(**{name: self._store[name][idx] for name in self._fields})

    def get(self, i: int) -> Transition:
        """i-th oldest stored transition."""
        if not 0 <= i < self.size:
            raise IndexError(i)
        start = (self._next - self.size) % self.capacity
        k = (start + i) % self.capacity
        return Transition(**{name: self._store[name][k].copy() for name in self._fields})


# -- updates -------------------------------------------------------------

def _total(values) -> ad.Var:
    tot = values[0]
    for v in values[1:]:
        tot = tot + v
    return tot


def compute_targets(cfg: NetConfig, batch: Batch, critic_target, actor_target, lam: float,
                    agent_types=None) -> np.ndarray:
    """Q_hat[m, i] = r + lam * Q'_i(s', a'(s')), bootstrap dropped on terminal rows."""
    if lam == 0.0:
        return batch.rewards.copy()
    a2 = nets.actor_forward(cfg, actor_target, batch.next_shared, batch.next_local, agent_types=agent_types)
    q2 = nets.critic_forward(cfg, critic_target, batch.next_shared, batch.next_local, a2,
                             agent_types=agent_types)
    return batch.rewards + lam * q2 * (~batch.done)[:, None]


def critic_step(cfg: NetConfig, critic_params, batch: Batch, targets: np.ndarray, adam: AdamState,
                agent_types=None) -> tuple[dict, float]:
    """Squared-error regression of Q(s_m, a_m) onto fixed targets; one Adam step."""
    M = len(batch)
    tape = Tape(strict=False)
    pv = nets.bind(tape, critic_params)
    out = nets.net_graph(cfg, pv, batch.shared, batch.local, tape, actions=batch.actions,
                         agent_types=agent_types)
    err = [ad.sub(q, targets[:, i:i + 1]) for i, q in enumerate(out.values)]
    loss = ad.scale(ad.sum_(_total([ad.square(e) for e in err])), 1.0 / M)
    value = float(loss.value[0])
    if not math.isfinite(value):
        raise TrainingDiverged(f"critic loss is {value}")
    grads = ad.backward(tape, loss)
    return ad.adam_step(adam, critic_params, grads), value


def actor_objective(cfg: NetConfig, tape: Tape, actor_vars, critic_params, shared, local,
                    agent_types=None) -> ad.Var:
    """(1/M) sum_m sum_i Q_i(s_m, a(s_m)) with the critic held constant."""
    M = local.shape[0]
    acts = nets.net_graph(cfg, actor_vars, shared, local, tape, agent_types=agent_types)
    cv = nets.bind(tape, critic_params, trainable=False)
    q = nets.net_graph(cfg, cv, shared, local, tape, actions=acts.values, agent_types=agent_types)
    return ad.scale(ad.sum_(_total(q.values)), 1.0 / M)


def actor_step(cfg: NetConfig, actor_params, critic_params, batch: Batch, adam: AdamState,
               agent_types=None) -> tuple[dict, float]:
    """Ascend the critic's value through every agent's action input."""
    tape = Tape(strict=False)
    pv = nets.bind(tape, actor_params)
    obj = actor_objective(cfg, tape, pv, critic_params, batch.shared, batch.local, agent_types)
    grads = ad.backward(tape, obj)
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if not math.isfinite(norm):
        raise TrainingDiverged(f"actor gradient norm is {norm}")
    return ad.adam_step(adam, actor_params, grads, maximize=True), norm


# -- configuration & state -----------------------------------------------

@dataclass
class TrainConfig:
    discount: float = 0.9
    tau: float = 0.01
    batch_size: int = 32
    t_max: int = 800
    episodes: int = 100
    buffer_capacity: int = 50_000
    lr_actor: float = 0.002
    lr_critic: float = 0.002
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    ou_sigma_final: float = 0.02
    ou_mu: float = 0.0
    ou_dt: float = 1.0
    unbounded_noise_scale: float = 1.0
    # rewards are multiplied by this before entering the replay buffer
    reward_scale: float = 1.0
    updates_per_step: int = 1
    seed: int = 0
    # episodic parameter-space noise for the gmezo variant
    gmezo_scale: float = 0.01
    record_wall_time: bool = False
    # stop after this many env steps in total; noise then anneals over steps
    step_budget: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.step_budget is not None and self.step_budget < 1:
            raise ValueError("step_budget must be positive")

    def sigma_at(self, episode: int, steps: int = 0) -> float:
        if self.step_budget:
            frac = min(1.0, steps / self.step_budget)
        elif self.episodes <= 1:
            return self.ou_sigma
        else:
            frac = min(1.0, episode / (self.episodes - 1))
        return self.ou_sigma + frac * (self.ou_sigma_final - self.ou_sigma)


@dataclass
class Learner:
    net: NetConfig
    actor: dict
    critic: dict
    actor_target: dict
    critic_target: dict
    actor_adam: AdamState
    critic_adam: AdamState
    variant: str = "bicnet"

    @classmethod
    def create(cls, net: NetConfig, rng: np.random.Generator, variant: str = "bicnet",
               lr_actor: float = 0.002, lr_critic: float = 0.002) -> "Learner":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        if net.comm != VARIANTS[variant]:
            net = replace(net, comm=VARIANTS[variant])
        actor = nets.init_params(net, "actor", rng)
        critic = nets.init_params(net, "critic", rng)
        return cls(net, actor, critic, dict(actor), dict(critic),
                   AdamState(lr=lr_actor), AdamState(lr=lr_critic), variant)

    def update(self, batch: Batch, cfg: TrainConfig, agent_types=None,
               critic_for_actor: dict | None = None) -> tuple[float, float]:
        targets = compute_targets(self.net, batch, self.critic_target, self.actor_target, cfg.discount,
                                  agent_types)
        self.critic, loss = critic_step(self.net, self.critic, batch, targets, self.critic_adam, agent_types)
        self.actor, gnorm = actor_step(self.net, self.actor, critic_for_actor or self.critic, batch,
                                       self.actor_adam, agent_types)
        self.critic_target = nets.soft_update(self.critic_target, self.critic, cfg.tau)
        self.actor_target = nets.soft_update(self.actor_target, self.actor, cfg.tau)
        return loss, gnorm


def out_layer_keys(params: Mapping) -> list[str]:
    return [k for k in params if k.endswith("/out/W") or k.endswith("/out/b")]


@dataclass
class GmezoState:
    """Episodic Gaussian perturbation of the critic's last layer.

    A perturbation is kept when the episode return beats the running
    baseline; its scale follows the one-fifth success rule.
    """

    scale: float = 0.01
    baseline: float | None = None
    delta: dict = field(default_factory=dict)

    def propose(self, critic: Mapping, rng: np.random.Generator) -> dict:
        self.delta = {k: rng.normal(0.0, self.scale, size=critic[k].shape) for k in out_layer_keys(critic)}
        out = dict(critic)
        for k, d in self.delta.items():
            out[k] = critic[k] + d
        return out

    def settle(self, critic: dict, episode_return: float) -> dict:
        success = self.baseline is None or episode_return > self.baseline
        self.baseline = episode_return if self.baseline is None else 0.9 * self.baseline + 0.1 * episode_return
        self.scale *= math.exp((float(success) - 0.2) / 3.0)
        if not success:
            return critic
        out = dict(critic)
        for k, d in self.delta.items():
            out[k] = critic[k] + d
        return out


# -- run log -------------------------------------------------------------

@dataclass
class RunLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append({c: row[c] for c in METRIC_COLUMNS})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


# -- training ------------------------------------------------------------

def build_net_config(env, variant: str = "bicnet", **kw) -> NetConfig:
    return NetConfig(
        shared_dim=env.shared_dim,
        local_dim=env.local_dim,
        action_dim=env.action_dim,
        comm=VARIANTS[variant],
        n_agents=env.n_agents if VARIANTS[variant] == "fully-connected" else None,
        type_groups=tuple(env.agent_types) if len(set(env.agent_types)) > 1 else None,
        action_low=tuple(env.action_low),
        action_high=tuple(env.action_high),
        **kw,
    )


def train(cfg: TrainConfig, env, variant: str = "bicnet", net: NetConfig | None = None,
          learner: Learner | None = None, callback=None) -> tuple[RunLog, Learner]:
    """Run the full actor-critic loop on ``env``; returns the metric log and trained learner."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng, noise_rng, sample_rng, gmezo_rng = (np.random.default_rng(s) for s in seeds)
    if learner is None:
        net = net or build_net_config(env, variant)
        learner = Learner.create(net, init_rng, variant, cfg.lr_actor, cfg.lr_critic)
    net = learner.net
    types = list(env.agent_types)
    n, A = env.n_agents, env.action_dim
    scale = noise_scale_for(net, cfg.unbounded_noise_scale)
    ou = OUProcess(n * A, cfg.ou_theta, cfg.ou_sigma, cfg.ou_mu, cfg.ou_dt, noise_rng)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    log = RunLog()
    gmezo = GmezoState(cfg.gmezo_scale) if learner.variant == "gmezo" else None
    budget = cfg.step_budget or math.inf
    total_steps = 0

    for ep in range(cfg.episodes):
        if total_steps >= budget:
            break
        t0 = time.perf_counter()
        ou.sigma = cfg.sigma_at(ep, total_steps)
        ou.reset()
        shared, local = env.reset()
        critic_for_actor = gmezo.propose(learner.critic, gmezo_rng) if gmezo else None
        ep_return, steps, losses, norms = 0.0, 0, [], []
        done, info = False, {}
        while not done and steps < cfg.t_max and total_steps < budget:
            a = explore_action(net, learner.actor, shared, local, ou, scale, types)
            try:
                (shared2, local2), r, done, info = env.step(a, training=True)
            except Exception as exc:
                # hand the rows logged so far back to the caller
                exc.run_log = log
                raise
            terminal = bool(done) and not info.get("truncated", False)
            buffer.push(Transition(shared, local, a, r * cfg.reward_scale, shared2, local2, terminal))
            shared, local = shared2, local2
            ep_return += float(np.mean(r))
            steps += 1
            total_steps += 1
            for _ in range(cfg.updates_per_step):
                batch = buffer.sample(cfg.batch_size, sample_rng)
                if batch is None:
                    break
                if gmezo:
                    # keep the perturbation riding on the latest critic weights
                    critic_for_actor = {k: learner.critic[k] + gmezo.delta.get(k, 0.0) for k in learner.critic}
                loss, gn = learner.update(batch, cfg, types, critic_for_actor)
                losses.append(loss)
                norms.append(gn)
        if gmezo:
            learner.critic = gmezo.settle(learner.critic, ep_return)
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.record_wall_time else 0.0
        log.append(episode=ep, steps=steps, **{"return": ep_return}, win=bool(info.get("win", False)),
                   critic_loss=float(np.mean(losses)) if losses else float("nan"),
                   actor_grad_norm=float(np.mean(norms)) if norms else float("nan"),
                   sigma=float(ou.sigma), wall_ms=round(wall, 3))
        if callback is not None:
            callback(ep, log.rows[-1], learner)
    return log, learner


def evaluate(net: NetConfig, actor_params, env, episodes: int, seed: int | None = None) -> dict:
    """Greedy rollouts; win rate / mean return, and |action - target| for the guessing game."""
    if episodes <= 0:
        return {"episodes": 0}
    if seed is not None:
        env.rng = np.random.default_rng(seed)
    types = list(env.agent_types)
    wins, returns, errors = [], [], []
    for _ in range(episodes):
        shared, local = env.reset()
        done, ret, info = False, 0.0, {}
        while not done:
            a = nets.actor_forward(net, actor_params, shared, local, agent_types=types)
            (shared, local), r, done, info = env.step(a, training=False)
            ret += float(np.mean(r))
            if "abs_error" in info:
                errors.extend(np.asarray(info["abs_error"]).ravel().tolist())
        wins.append(bool(info.get("win", False)))
        returns.append(ret)
    out = {"episodes": episodes, "win_rate": float(np.mean(wins)), "mean_return": float(np.mean(returns))}
    if errors:
        err = np.asarray(errors)
        out["mean_abs_error"] = float(err.mean())
        out["std_abs_error"] = float(err.std())
    return out


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


# -- supervised ceiling for the guessing game ----------------------------

@dataclass
class SupervisedMLP:
    """One-hidden-layer regressor from all inputs straight to their sum."""

    params: dict

    @classmethod
    def create(cls, n_inputs: int, rng: np.random.Generator, hidden: int = 10) -> "SupervisedMLP":
        return cls({
            "W1": rng.normal(0, 1 / math.sqrt(n_inputs), (n_inputs, hidden)), "b1": np.zeros(hidden),
            "W2": rng.normal(0, 1 / math.sqrt(hidden), (hidden, 1)), "b2": np.zeros(1),
        })

    def _graph(self, tape: Tape, pv, x: np.ndarray) -> ad.Var:
        h = ad.tanh(ad.add(ad.matmul(tape.constant(x), pv["W1"]), pv["b1"]))
        return ad.add(ad.matmul(h, pv["W2"]), pv["b2"])

    def predict(self, x: np.ndarray) -> np.ndarray:
        tape = Tape(strict=False)
        pv = {k: tape.constant(v) for k, v in self.params.items()}
        return self._graph(tape, pv, np.atleast_2d(x)).value[:, 0]

    def fit_step(self, x: np.ndarray, y: np.ndarray, adam: AdamState) -> float:
        tape = Tape(strict=False)
        pv = nets.bind(tape, self.params)
        err = ad.sub(self._graph(tape, pv, x), y.reshape(-1, 1))
        loss = ad.mean(ad.square(err))
        self.params = ad.adam_step(adam, self.params, ad.backward(tape, loss))
        return float(loss.value[0])


def train_supervised(n: int, steps: int, rng: np.random.Generator, sampler, batch_size: int = 32,
                     hidden: int = 10, lr: float = 0.01, input_scale: float = 0.1) -> SupervisedMLP:
    """Squared-loss fit of ``sum(x)`` from ``x``; ``sampler(rng, size)`` draws raw inputs.

    Inputs and targets are divided by ``1 / input_scale`` during training and the
    scale is folded back into the returned weights.
    """
    mlp = SupervisedMLP.create(n, rng, hidden)
    adam = AdamState(lr=lr)
    for _ in range(steps):
        x = sampler(rng, batch_size * n).reshape(batch_size, n)
        mlp.fit_step(x * input_scale, x.sum(1) * input_scale, adam)
    p = mlp.params
    p = {"W1": p["W1"] * input_scale, "b1": p["b1"], "W2": p["W2"] / input_scale, "b2": p["b2"] / input_scale}
    return SupervisedMLP(p)
