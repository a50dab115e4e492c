"""The guessing-sum game: every agent sees one number and must output the sum."""
from __future__ import annotations

import numpy as np

OBS_MEAN = 0.0
OBS_STD = 5.0
OBS_LIMIT = 10.0


def truncated_normal(rng: np.random.Generator, size: int, mean: float = OBS_MEAN,
                     std: float = OBS_STD, limit: float = OBS_LIMIT) -> np.ndarray:
    """Normal(mean, std^2) restricted to [-limit, limit] by rejection."""
    out = np.empty(size)
    filled = 0
    while filled < size:
        draw = rng.normal(mean, std, size=size - filled)
        keep = draw[np.abs(draw) <= limit]
        out[filled:filled + len(keep)] = keep
        filled += len(keep)
    return out


class GuessEnv:
    """Single-step episodes; reward_i = -|a_i - sum(x)|."""

    shared_dim = 0
    local_dim = 1
    action_dim = 1
    action_low: tuple = ()
    action_high: tuple = ()

    def __init__(self, n: int, seed: int = 0):
        if n < 1:
            raise ValueError("need at least one agent")
        self.n_agents = n
        self.agent_types = [0] * n
        self.rng = np.random.default_rng(seed)
        self.x = np.zeros(n)
        self.last_actions = np.zeros(n)
        self.done = True

    @property
    def target(self) -> float:
        return float(self.x.sum())

    def observe(self):
        return np.zeros(0), self.x.reshape(-1, 1).copy()

    def reset(self, x=None):
        self.x = truncated_normal(self.rng, self.n_agents) if x is None else np.asarray(x, float)
        self.done = False
        return self.observe()

    def step(self, actions, training: bool = True):
        if self.done:
            raise ValueError("episode already finished; call reset()")
        a = np.asarray(actions, dtype=float).reshape(self.n_agents)
        err = np.abs(a - self.target)
        self.last_actions = a
        self.done = True
        return self.observe(), -err, True, {"abs_error": err, "win": False, "t": 1}

    def replay_record(self, rewards=None) -> dict:
        rec = {"inputs": self.x.tolist(), "target": self.target, "actions": self.last_actions.tolist()}
        if rewards is not None:
            rec["rewards"] = np.asarray(rewards, float).tolist()
        return rec
