"""Continuous 2D combat micro-simulator.

Units live in a ``W x H`` arena. Each step every living unit either fires at
a point (``pos + distance * (cos angle, sin angle)``) or moves along the
same heading. Damage resolves simultaneously against pre-step health.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml

OURS, ENEMY = 0, 1
ACTION_DIM = 3


@dataclass(frozen=True)
class UnitSpec:
    type_id: int
    name: str
    hp: float
    damage: float
    attack_range: float
    speed: float
    cooldown: int
    melee: bool

    def __post_init__(self):
        if min(self.hp, self.damage, self.speed) <= 0 or self.cooldown <= 0 or self.attack_range < 0:
            raise ValueError(f"unit spec {self.name!r} has non-positive stats")


RANGED = UnitSpec(0, "ranged", hp=40.0, damage=6.0, attack_range=8.0, speed=1.2, cooldown=3, melee=False)
MELEE = UnitSpec(1, "melee", hp=120.0, damage=10.0, attack_range=1.5, speed=1.5, cooldown=2, melee=True)
UNIT_TYPES = {RANGED.name: RANGED, MELEE.name: MELEE}
N_UNIT_TYPES = 2


@dataclass(frozen=True)
class Arena:
    width: float = 64.0
    height: float = 64.0
    unit_radius: float = 0.5
    hit_radius: float = 1.0
    d_max: float = 10.0


@dataclass(frozen=True)
class Scenario:
    name: str
    ours: tuple        # unit type names
    enemies: tuple
    ours_region: tuple   # (x0, y0, x1, y1)
    enemy_region: tuple
    t_max: int = 800

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        def roster(entries):
            out = []
            for e in entries:
                if isinstance(e, str):
                    out.append(e)
                else:
                    out.extend([e["type"]] * int(e.get("count", 1)))
            for name in out:
                if name not in UNIT_TYPES:
                    raise ValueError(f"unknown unit type {name!r}; known: {sorted(UNIT_TYPES)}")
            return tuple(out)

        return cls(
            name=d["name"],
            ours=roster(d["ours"]),
            enemies=roster(d["enemies"]),
            ours_region=tuple(float(v) for v in d["ours_region"]),
            enemy_region=tuple(float(v) for v in d["enemy_region"]),
            t_max=int(d.get("t_max", 800)),
        )


_LEFT = (16.0, 24.0, 22.0, 40.0)
_RIGHT = (34.0, 24.0, 40.0, 40.0)

SCENARIOS: dict[str, Scenario] = {
    s.name: s for s in [
        Scenario("3r_vs_1m", ("ranged",) * 3, ("melee",), _LEFT, _RIGHT),
        Scenario("5v5", ("ranged",) * 5, ("ranged",) * 5, _LEFT, _RIGHT),
        Scenario("10r_vs_13m", ("ranged",) * 10, ("melee",) * 13,
                 (10.0, 16.0, 20.0, 48.0), (36.0, 16.0, 46.0, 48.0)),
        Scenario("10r_vs_1m", ("ranged",) * 10, ("melee",), (10.0, 20.0, 20.0, 44.0), _RIGHT),
        Scenario("2r_2m_vs_1m", ("ranged", "ranged", "melee", "melee"), ("melee",), _LEFT, _RIGHT),
    ]
}


def load_scenarios(path: str | Path) -> dict[str, Scenario]:
    """Read scenario definitions from a YAML file (a list under ``scenarios``)."""
    with open(path) as f:
        doc = yaml.safe_load(f)
    return {d["name"]: Scenario.from_dict(d) for d in doc["scenarios"]}


def get_scenario(name: str, extra: Mapping[str, Scenario] | None = None) -> Scenario:
    table = {**SCENARIOS, **(extra or {})}
    if name not in table:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(sorted(table))}")
    return table[name]


@dataclass
class CombatState:
    """Per-unit arrays; ours occupy the first slots in canonical order."""

    t: int
    pos: np.ndarray        # (U, 2)
    hp: np.ndarray         # (U,)
    cooldown: np.ndarray   # (U,) int
    alive: np.ndarray      # (U,) bool
    team: np.ndarray       # (U,) int
    specs: tuple           # UnitSpec per slot
    n_ours: int
    t_max: int
    last_actions: np.ndarray = field(default=None)   # (U, 3) as executed
    last_attacked: np.ndarray = field(default=None)  # (U,) bool

    @property
    def max_hp(self) -> np.ndarray:
        return np.array([s.hp for s in self.specs])

    @property
    def n_enemies(self) -> int:
        return len(self.specs) - self.n_ours

    def team_slice(self, team: int) -> slice:
        return slice(0, self.n_ours) if team == OURS else slice(self.n_ours, len(self.specs))

    @property
    def done(self) -> bool:
        return (not self.alive[: self.n_ours].any() or not self.alive[self.n_ours:].any()
                or self.t >= self.t_max)

    @property
    def won(self) -> bool:
        return not self.alive[self.n_ours:].any() and self.alive[: self.n_ours].any()

    def copy(self) -> "CombatState":
        return replace(self, pos=self.pos.copy(), hp=self.hp.copy(), cooldown=self.cooldown.copy(),
                       alive=self.alive.copy(),
                       last_actions=None if self.last_actions is None else self.last_actions.copy(),
                       last_attacked=None if self.last_attacked is None else self.last_attacked.copy())


def canonical_order(roster) -> list[int]:
    """Ascending unit-type id, then spawn index."""
    return sorted(range(len(roster)), key=lambda k: (UNIT_TYPES[roster[k]].type_id, k))


def combat_reset(scenario: Scenario, rng: np.random.Generator, arena: Arena = Arena()) -> CombatState:
    ours = [scenario.ours[k] for k in canonical_order(scenario.ours)]
    enemies = [scenario.enemies[k] for k in canonical_order(scenario.enemies)]
    specs = tuple(UNIT_TYPES[n] for n in ours + enemies)
    pos = []
    for region, count in ((scenario.ours_region, len(ours)), (scenario.enemy_region, len(enemies))):
        x0, y0, x1, y1 = region
        for _ in range(count):
            pos.append((rng.uniform(x0, x1), rng.uniform(y0, y1)))
    U = len(specs)
    state = CombatState(
        t=0,
        pos=np.array(pos, dtype=float),
        hp=np.array([s.hp for s in specs]),
        cooldown=np.zeros(U, dtype=int),
        alive=np.ones(U, dtype=bool),
        team=np.array([OURS] * len(ours) + [ENEMY] * len(enemies)),
        specs=specs,
        n_ours=len(ours),
        t_max=scenario.t_max,
    )
    _clamp(state.pos, arena)
    _resolve_collisions(state.pos, state.alive, arena)
    return state


def _clamp(pos: np.ndarray, arena: Arena):
    r = arena.unit_radius
    np.clip(pos[:, 0], r, arena.width - r, out=pos[:, 0])
    np.clip(pos[:, 1], r, arena.height - r, out=pos[:, 1])


def _resolve_collisions(pos: np.ndarray, alive: np.ndarray, arena: Arena, iters: int = 100):
    """Push overlapping living units apart until centres are >= 2r apart."""
    idx = np.flatnonzero(alive)
    min_d = 2.0 * arena.unit_radius
    for _ in range(iters):
        moved = False
        for a_k in range(len(idx)):
            for b_k in range(a_k + 1, len(idx)):
                a, b = idx[a_k], idx[b_k]
                d = pos[b] - pos[a]
                dist = math.hypot(d[0], d[1])
                if dist >= min_d:
                    continue
                if dist < 1e-12:
                    # coincident centres: split along a fixed per-pair direction
                    ang = 0.7 * (a + 1) + 1.3 * (b + 1)
                    u = np.array([math.cos(ang), math.sin(ang)])
                else:
                    u = d / dist
                push = 0.5 * (min_d - dist) + 1e-9
                pos[a] -= push * u
                pos[b] += push * u
                moved = True
        _clamp(pos, arena)
        if not moved:
            return


def clamp_actions(actions: np.ndarray, arena: Arena = Arena()) -> np.ndarray:
    a = np.array(actions, dtype=float).reshape(-1, ACTION_DIM)
    a[:, 0] = np.clip(a[:, 0], 0.0, 1.0)
    a[:, 1] = np.clip(a[:, 1], -math.pi, math.pi)
    a[:, 2] = np.clip(a[:, 2], 0.0, arena.d_max)
    return a


def action_bounds(arena: Arena = Arena()) -> tuple[tuple, tuple]:
    return (0.0, -math.pi, 0.0), (1.0, math.pi, arena.d_max)


# -- rewards -------------------------------------------------------------

@dataclass(frozen=True)
class RewardParams:
    mode: str = "global"
    k: int = 3
    normalize: bool = True

    def __post_init__(self):
        if self.mode not in ("global", "local-topK"):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("K must be >= 1")


def health_loss(state: CombatState, state2: CombatState, normalize: bool = True) -> np.ndarray:
    loss = state.hp - state2.hp
    return loss / state.max_hp if normalize else loss


def reward_global(state: CombatState, state2: CombatState, normalize: bool = True) -> float:
    """Mean enemy health lost minus mean own health lost (initial roster sizes)."""
    d = health_loss(state, state2, normalize)
    n = state.n_ours
    return float(d[n:].sum() / state.n_enemies - d[:n].sum() / n)


def reward_global_enemy(state: CombatState, state2: CombatState, normalize: bool = True) -> float:
    d = health_loss(state, state2, normalize)
    n = state.n_ours
    return float(d[:n].sum() / n - d[n:].sum() / state.n_enemies)


def _nearest_living(state: CombatState, i: int, team: int, k: int) -> list[int]:
    sl = state.team_slice(team)
    cand = [j for j in range(sl.start, sl.stop) if state.alive[j]]
    d = [float(np.hypot(*(state.pos[j] - state.pos[i]))) for j in cand]
    order = sorted(range(len(cand)), key=lambda q: (d[q], cand[q]))
    return [cand[q] for q in order[:k]]


def reward_local(state: CombatState, state2: CombatState, i: int, k: int,
                 normalize: bool = True) -> float:
    """Top-K local reward for unit slot ``i`` (enemy damage counts positive)."""
    if not state.alive[i]:
        raise ValueError(f"unit {i} is dead; local reward is defined for living agents")
    d = health_loss(state, state2, normalize)
    my_team = int(state.team[i])
    foes = _nearest_living(state, i, 1 - my_team, k)
    mates = _nearest_living(state, i, my_team, k)   # includes i itself at distance 0
    gain = sum(d[j] for j in foes) / len(foes) if foes else 0.0
    cost = sum(d[j] for j in mates) / len(mates) if mates else 0.0
    return float(gain - cost)


def agent_rewards(state: CombatState, state2: CombatState, params: RewardParams) -> np.ndarray:
    n = state.n_ours
    if params.mode == "global":
        return np.full(n, reward_global(state, state2, params.normalize))
    return np.array([reward_local(state, state2, i, params.k, params.normalize) if state.alive[i] else 0.0
                     for i in range(n)])


# -- dynamics ------------------------------------------------------------

def combat_step(state: CombatState, our_actions: np.ndarray, enemy_actions: np.ndarray,
                rng: np.random.Generator, training: bool = True, arena: Arena = Arena()) -> CombatState:
    """Advance one step. Pure given (state, actions, rng draws)."""
    if state.done:
        raise ValueError("cannot act on a terminal state")
    acts = np.concatenate([clamp_actions(our_actions, arena), clamp_actions(enemy_actions, arena)])
    U = len(state.specs)
    if acts.shape[0] != U:
        raise ValueError(f"expected {U} actions ({state.n_ours} ours), got {acts.shape[0]}")
    draws = rng.random(U)
    s2 = state.copy()
    s2.t = state.t + 1
    damage = np.zeros(U)
    fired = np.zeros(U, dtype=bool)
    attacked = np.zeros(U, dtype=bool)
    moves = np.zeros((U, 2))
    for u in range(U):
        if not state.alive[u]:
            continue
        p, ang, dist = acts[u]
        attack = draws[u] < p if training else p >= 0.5
        heading = np.array([math.cos(ang), math.sin(ang)])
        spec = state.specs[u]
        if attack:
            attacked[u] = True
            if state.cooldown[u] > 0:
                continue
            fired[u] = True
            target = state.pos[u] + dist * heading
            victim, best = -1, math.inf
            foes = state.team_slice(1 - int(state.team[u]))
            for j in range(foes.start, foes.stop):
                if not state.alive[j]:
                    continue
                dt = math.hypot(*(state.pos[j] - target))
                du = math.hypot(*(state.pos[j] - state.pos[u]))
                if dt <= arena.hit_radius and du <= spec.attack_range and dt < best:
                    victim, best = j, dt
            if victim >= 0:
                damage[victim] += spec.damage
        else:
            moves[u] = min(dist, spec.speed) * heading
    s2.hp = np.maximum(state.hp - damage, 0.0)
    s2.alive = state.alive & (s2.hp > 0)
    s2.hp[~s2.alive] = 0.0
    s2.pos = state.pos + moves * s2.alive[:, None]
    _clamp(s2.pos, arena)
    _resolve_collisions(s2.pos, s2.alive, arena)
    cd = np.where(fired, np.array([s.cooldown for s in state.specs]), state.cooldown)
    s2.cooldown = np.maximum(cd - 1, 0) * s2.alive
    s2.last_actions = acts
    s2.last_attacked = attacked
    return s2


# -- observation ---------------------------------------------------------

def unit_block(state: CombatState, u: int, arena: Arena) -> np.ndarray:
    block = np.zeros(5 + N_UNIT_TYPES)
    if u >= len(state.specs) or not state.alive[u]:
        return block
    s = state.specs[u]
    block[0] = 1.0
    block[1] = state.pos[u, 0] / arena.width
    block[2] = state.pos[u, 1] / arena.height
    block[3] = state.hp[u] / s.hp
    block[4] = state.cooldown[u] / s.cooldown
    block[5 + s.type_id] = 1.0
    return block


BLOCK_DIM = 5 + N_UNIT_TYPES
REL_SCALE = 10.0


def observe(state: CombatState, k: int = 3, slots: tuple[int, int] | None = None,
            arena: Arena = Arena()) -> tuple[np.ndarray, np.ndarray]:
    """Shared roster encoding plus per-agent local views.

    ``slots`` pads the roster to fixed (ours, enemies) capacities so a net
    trained on one roster size can run on another; absent slots look dead.
    """
    n, m = state.n_ours, state.n_enemies
    cap_o, cap_e = slots if slots is not None else (n, m)
    if cap_o < n or cap_e < m:
        raise ValueError(f"slot capacity {slots} smaller than roster ({n}, {m})")
    blocks = [unit_block(state, u, arena) if u < n else np.zeros(BLOCK_DIM) for u in range(cap_o)]
    blocks += [unit_block(state, n + j, arena) if j < m else np.zeros(BLOCK_DIM) for j in range(cap_e)]
    shared = np.concatenate(blocks)
    local = np.zeros((n, BLOCK_DIM + 3 * k))
    for i in range(n):
        local[i, :BLOCK_DIM] = blocks[i]
        if not state.alive[i]:
            continue
        for q, j in enumerate(_nearest_living(state, i, ENEMY, k)):
            dx, dy = state.pos[j] - state.pos[i]
            off = BLOCK_DIM + 3 * q
            local[i, off:off + 3] = (dx / REL_SCALE, dy / REL_SCALE, math.hypot(dx, dy) / REL_SCALE)
    return shared, local


def obs_dims(scenario: Scenario, k: int = 3, slots: tuple[int, int] | None = None) -> tuple[int, int]:
    cap_o, cap_e = slots if slots is not None else (len(scenario.ours), len(scenario.enemies))
    return BLOCK_DIM * (cap_o + cap_e), BLOCK_DIM + 3 * k


# -- scripted opponents --------------------------------------------------

SCRIPTED_KINDS = ("attack-closest", "attack-weakest", "idle")


def scripted_policy(kind: str, state: CombatState, team: int, arena: Arena = Arena()) -> np.ndarray:
    """Rule-based actions for every slot of ``team`` (dead slots get zeros)."""
    if kind not in SCRIPTED_KINDS:
        raise ValueError(f"unknown scripted policy {kind!r}; expected one of {SCRIPTED_KINDS}")
    mine = state.team_slice(team)
    foes = state.team_slice(1 - team)
    out = np.zeros((mine.stop - mine.start, ACTION_DIM))
    if kind == "idle":
        return out
    living = [j for j in range(foes.start, foes.stop) if state.alive[j]]
    if not living:
        return out
    for row, u in enumerate(range(mine.start, mine.stop)):
        if not state.alive[u]:
            continue
        if kind == "attack-closest":
            key = lambda j: (math.hypot(*(state.pos[j] - state.pos[u])), j)  # noqa: E731
        else:
            key = lambda j: (state.hp[j], j)  # noqa: E731
        target = min(living, key=key)
        d = state.pos[target] - state.pos[u]
        dist = math.hypot(d[0], d[1])
        ang = math.atan2(d[1], d[0])
        if dist <= state.specs[u].attack_range:
            out[row] = (1.0, ang, min(dist, arena.d_max))
        else:
            out[row] = (0.0, ang, min(dist, arena.d_max))
    return out


# -- environment wrapper -------------------------------------------------

class CombatEnv:
    """Reset/step interface over the simulator with a fixed scripted enemy."""

    def __init__(self, scenario: str | Scenario = "3r_vs_1m", enemy: str = "attack-closest",
                 reward: RewardParams = RewardParams(), seed: int = 0, obs_k: int = 3,
                 slots: tuple[int, int] | None = None, arena: Arena = Arena(),
                 action_repeat: int = 1, t_max: int | None = None):
        self.scenario = get_scenario(scenario) if isinstance(scenario, str) else scenario
        if t_max is not None:
            self.scenario = replace(self.scenario, t_max=t_max)
        if enemy not in SCRIPTED_KINDS:
            raise ValueError(f"unknown scripted policy {enemy!r}")
        self.enemy = enemy
        self.reward_params = reward
        self.obs_k = obs_k
        self.slots = slots
        self.arena = arena
        self.action_repeat = max(1, int(action_repeat))
        self.rng = np.random.default_rng(seed)
        self.state: CombatState | None = None
        self.n_agents = len(self.scenario.ours)
        self.shared_dim, self.local_dim = obs_dims(self.scenario, obs_k, slots)
        self.action_dim = ACTION_DIM
        self.action_low, self.action_high = action_bounds(arena)
        self.agent_types = [UNIT_TYPES[self.scenario.ours[k]].type_id
                            for k in canonical_order(self.scenario.ours)]

    def observe(self):
        return observe(self.state, self.obs_k, self.slots, self.arena)

    def reset(self):
        self.state = combat_reset(self.scenario, self.rng, self.arena)
        return self.observe()

    def step(self, actions, training: bool = True):
        total = np.zeros(self.n_agents)
        for _ in range(self.action_repeat):
            enemy = scripted_policy(self.enemy, self.state, ENEMY, self.arena)
            s2 = combat_step(self.state, actions, enemy, self.rng, training, self.arena)
            total += agent_rewards(self.state, s2, self.reward_params)
            self.state = s2
            if s2.done:
                break
        s = self.state
        truncated = s.t >= s.t_max and s.alive[: s.n_ours].any() and s.alive[s.n_ours:].any()
        info = {"win": s.won, "t": s.t, "truncated": bool(truncated)}
        return self.observe(), total, self.state.done, info

    def replay_record(self, rewards=None) -> dict:
        s = self.state
        units = []
        for u in range(len(s.specs)):
            units.append({
                "slot": u,
                "team": "ours" if s.team[u] == OURS else "enemy",
                "type": s.specs[u].name,
                "x": round(float(s.pos[u, 0]), 6),
                "y": round(float(s.pos[u, 1]), 6),
                "hp": float(s.hp[u]),
                "alive": bool(s.alive[u]),
                "action": None if s.last_actions is None else [float(v) for v in s.last_actions[u]],
            })
        rec = {"t": int(s.t), "units": units}
        if rewards is not None:
            rec["rewards"] = [float(r) for r in rewards]
        return rec

