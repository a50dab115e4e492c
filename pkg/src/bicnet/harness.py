"""Run orchestration: configs, manifests, checkpoints, log writers, the guess table."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from . import __version__, nets
from .envs import CombatEnv, GuessEnv, RewardParams, load_scenarios
from .envs.combat import Arena
from .envs.guess import truncated_normal
from .learner import (METRIC_COLUMNS, VARIANTS, Learner, TrainConfig, _fmt, build_net_config, train,
                      train_supervised)
from .nets import NetConfig

# -- configuration -------------------------------------------------------

NET_KEYS = ("embed_hidden", "rnn_hidden", "head_hidden", "obs_scale", "action_scale", "rnn_init",
            "critic_rnn_hidden")
COMBAT_KEYS = ("kind", "scenario", "scenario_file", "enemy", "reward_mode", "k", "normalize", "obs_k",
               "slots", "action_repeat", "t_max", "hit_radius")
GUESS_KEYS = ("kind", "n")

# Settings that make the unbounded guessing game well conditioned: inputs are
# shrunk towards unit scale, outputs and exploration grown to the scale of the sum.
GUESS_TRAIN = {"updates_per_step": 2, "reward_scale": 0.1, "unbounded_noise_scale": 5.0}
GUESS_NET = {"obs_scale": 0.1, "action_scale": 10.0}


def default_config() -> dict:
    return {
        "seed": 0,
        "variant": "bicnet",
        "out": "runs/default",
        "env": {"kind": "combat", "scenario": "3r_vs_1m", "enemy": "attack-closest",
                "reward_mode": "global", "k": 3, "normalize": True, "obs_k": 3, "slots": None,
                "action_repeat": 1, "t_max": None, "hit_radius": Arena().hit_radius,
                "scenario_file": None},
        "net": {"embed_hidden": [64], "rnn_hidden": 32, "head_hidden": [32],
                "obs_scale": 1.0, "action_scale": 1.0, "rnn_init": "gaussian",
                "critic_rnn_hidden": None},
        "train": {f.name: _plain(f.default) for f in fields(TrainConfig) if f.name != "seed"},
        "eval": {"episodes": 100, "seed": 10_000, "actor": "target"},
    }


def guess_config(n: int = 5, variant: str = "bicnet", seed: int = 0, episodes: int = 5000) -> dict:
    cfg = default_config()
    cfg["env"] = {"kind": "guess", "n": n}
    cfg["variant"] = variant
    cfg["seed"] = seed
    cfg["net"].update(GUESS_NET)
    cfg["train"].update(GUESS_TRAIN, episodes=episodes)
    return cfg


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def deep_merge(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_assignments(items: Sequence[str]) -> dict:
    """``["train.episodes=50", "env.n=10"]`` -> nested dict; values parsed as YAML scalars."""
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key.path=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = yaml.safe_load(raw)
    return out


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, Mapping):
        raise ValueError(f"config {p} must hold a mapping at top level")
    return dict(data)


def validate_config(cfg: Mapping) -> dict:
    """Fill defaults for the env kind and reject unknown keys or values."""
    kind = cfg.get("env", {}).get("kind", "combat")
    base = guess_config() if kind == "guess" else default_config()
    if kind == "guess":
        # guess runs keep their tuned defaults unless the file overrides them
        base["seed"], base["variant"] = 0, "bicnet"
    merged = deep_merge(base, cfg)
    allowed_top = {"seed", "variant", "out", "env", "net", "train", "eval"}
    _reject_unknown(merged, allowed_top, "config")
    _reject_unknown(merged["env"], set(GUESS_KEYS if kind == "guess" else COMBAT_KEYS), "env")
    _reject_unknown(merged["net"], set(NET_KEYS), "net")
    _reject_unknown(merged["train"], {f.name for f in fields(TrainConfig)} - {"seed"}, "train")
    _reject_unknown(merged["eval"], {"episodes", "seed", "actor"}, "eval")
    if kind not in ("combat", "guess"):
        raise ValueError(f"unknown env kind {kind!r}; expected combat or guess")
    if merged["variant"] not in VARIANTS:
        raise ValueError(f"unknown variant {merged['variant']!r}; expected one of {sorted(VARIANTS)}")
    if merged["eval"]["actor"] not in ("target", "online"):
        raise ValueError("eval.actor must be 'target' or 'online'")
    train_config(merged)  # field-level validation
    return merged


def _reject_unknown(d: Mapping, allowed: set, where: str):
    extra = sorted(set(d) - allowed)
    if extra:
        raise ValueError(f"unknown {where} key(s): {', '.join(extra)}")


def config_hash(cfg: Mapping) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def build_id() -> str:
    """Package version plus a digest of the package sources."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def train_config(cfg: Mapping) -> TrainConfig:
    t = dict(cfg["train"])
    return TrainConfig(seed=int(cfg["seed"]), **t)


def make_env(env_cfg: Mapping, seed: int):
    e = dict(env_cfg)
    if e.get("kind", "combat") == "guess":
        return GuessEnv(int(e["n"]), seed=seed)
    extra = load_scenarios(e["scenario_file"]) if e.get("scenario_file") else None
    scenario = extra[e["scenario"]] if extra and e["scenario"] in extra else e["scenario"]
    slots = tuple(e["slots"]) if e.get("slots") else None
    return CombatEnv(scenario, enemy=e["enemy"],
                     reward=RewardParams(e["reward_mode"], int(e["k"]), bool(e["normalize"])),
                     seed=seed, obs_k=int(e["obs_k"]), slots=slots, arena=Arena(hit_radius=float(e["hit_radius"])),
                     action_repeat=int(e["action_repeat"]), t_max=e.get("t_max"))


def net_config_for(env, cfg: Mapping) -> NetConfig:
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["net"].items()}
    return build_net_config(env, cfg["variant"], **kw)


def write_manifest(out_dir: Path, cfg: Mapping, command: str, seeds: Mapping) -> dict:
    man = {"command": command, "config_hash": config_hash(cfg), "seeds": dict(seeds), "build": build_id()}
    (out_dir / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


def echo_config(out_dir: Path, cfg: Mapping):
    (out_dir / "config.yaml").write_text(yaml.safe_dump(dict(cfg), sort_keys=True))


# -- checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"BICNET-CKPT 1\n"
SECTIONS = ("actor", "critic", "actor_target", "critic_target")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    net: NetConfig
    variant: str
    params: dict          # section name -> parameter dict
    meta: dict = field(default_factory=dict)

    @property
    def actor(self):
        return self.params["actor"]


def checkpoint_bytes(learner: Learner, meta: Mapping | None = None) -> bytes:
    """Magic line, one JSON header line, then the four parameter images."""
    blobs = [nets.params_serialize(getattr(learner, s)) for s in SECTIONS]
    body = b"".join(blobs)
    header = {
        "variant": learner.variant,
        "net": learner.net.to_dict(),
        "meta": dict(meta or {}),
        "sections": [[s, len(b)] for s, b in zip(SECTIONS, blobs)],
        "sha256": hashlib.sha256(body).hexdigest(),
    }
    return CKPT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + body


def save_checkpoint(path: str | Path, learner: Learner, meta: Mapping | None = None):
    Path(path).write_bytes(checkpoint_bytes(learner, meta))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError("not a checkpoint, or unsupported version")
    end = blob.find(b"\n", len(CKPT_MAGIC))
    if end < 0:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[len(CKPT_MAGIC):end])
        net = NetConfig.from_dict(header["net"])
        variant = header["variant"]
        sections = header["sections"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from None
    body = blob[end + 1:]
    if hashlib.sha256(body).hexdigest() != header.get("sha256"):
        raise CheckpointError("checkpoint checksum mismatch: file is corrupted")
    if [s for s, _ in sections] != list(SECTIONS):
        raise CheckpointError(f"checkpoint sections {[s for s, _ in sections]} != {list(SECTIONS)}")
    rng = np.random.default_rng(0)
    expected = {"actor": nets.init_params(net, "actor", rng), "critic": nets.init_params(net, "critic", rng)}
    params, off = {}, 0
    for name, size in sections:
        role = "critic" if name.startswith("critic") else "actor"
        try:
            params[name] = nets.params_deserialize(body[off:off + size], expected[role])
        except nets.ManifestError as exc:
            raise CheckpointError(f"section {name}: {exc}") from None
        off += size
    if off != len(body):
        raise CheckpointError("trailing bytes after the last section")
    return Checkpoint(net, variant, params, header.get("meta", {}))


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return parse_checkpoint(p.read_bytes())


def check_compatible(net: NetConfig, env):
    """The checkpoint's net must accept this env's observations and team size."""
    if (net.shared_dim, net.local_dim, net.action_dim) != (env.shared_dim, env.local_dim, env.action_dim):
        raise CheckpointError(
            f"checkpoint expects obs/action dims {(net.shared_dim, net.local_dim, net.action_dim)}, env has "
            f"{(env.shared_dim, env.local_dim, env.action_dim)}; use matching obs slots")
    if net.comm not in nets.N_INDEPENDENT_MODES and net.n_agents != env.n_agents:
        raise CheckpointError(f"{net.comm} parameters are tied to N={net.n_agents}; env has N={env.n_agents}")
    missing = set(env.agent_types) - set(net.type_ids)
    if missing:
        raise CheckpointError(f"checkpoint has no parameters for unit types {sorted(missing)}")


def eval_net(net: NetConfig, env) -> NetConfig:
    """Rebind type grouping to the env's roster, keeping every parameter shape."""
    from dataclasses import replace
    groups = tuple(env.agent_types) if net.type_groups is not None else None
    return replace(net, type_groups=groups, n_agents=net.n_agents if net.comm == "fully-connected" else None)


# -- writers -------------------------------------------------------------

class MetricsWriter:
    """Streams RunLog rows to CSV so a crash leaves every finished episode on disk."""

    def __init__(self, path: str | Path):
        self.f = open(path, "w", newline="")
        self.w = csv.writer(self.f, lineterminator="\n")
        self.w.writerow(METRIC_COLUMNS)
        self.f.flush()

    def write(self, row: Mapping):
        self.w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        self.f.flush()

    def close(self):
        self.f.close()


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False) + "\n"


def rollout(net: NetConfig, actor, env, episodes: int = 1, replay: bool = False, hidden: bool = False):
    """Greedy episodes; yields per-step dicts carrying replay and/or hidden-state payloads."""
    types = list(env.agent_types)
    for ep in range(episodes):
        shared, local = env.reset()
        done, t = False, 0
        while not done:
            a, h = nets.actor_forward(net, actor, shared, local, agent_types=types, return_hidden=True)
            inputs = local.copy()
            (shared, local), r, done, info = env.step(a, training=False)
            t += 1
            rec = {"episode": ep, "t": t}
            if replay:
                if hasattr(env, "replay_record"):
                    rec.update(env.replay_record(r))
                else:
                    rec.update(actions=a.tolist(), rewards=np.asarray(r).tolist())
            if hidden:
                rec["inputs"] = inputs.tolist()
                rec["fwd"] = h[0].tolist() if h else None
                rec["bwd"] = h[1].tolist() if h else None
            yield rec


def write_jsonl(path: str | Path, records) -> int:
    n = 0
    with open(path, "w") as f:
        for rec in records:
            f.write(_json_line(rec))
            f.flush()
            n += 1
    return n


# -- training run --------------------------------------------------------

def run_training(cfg: Mapping, out_dir: str | Path) -> dict:
    """Train per ``cfg``; writes config echo, manifest, metrics CSV and checkpoint into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out, cfg)
    seed = int(cfg["seed"])
    write_manifest(out, cfg, "train", {"train": seed, "env": seed, "eval": int(cfg["eval"]["seed"])})
    env = make_env(cfg["env"], seed)
    net = net_config_for(env, cfg)
    writer = MetricsWriter(out / "metrics.csv")
    try:
        log, learner = train(train_config(cfg), env, cfg["variant"], net=net,
                             callback=lambda ep, row, l: writer.write(row))
    finally:
        writer.close()
    save_checkpoint(out / "checkpoint.bin", learner, {"env": cfg["env"], "seed": seed})
    return {"episodes": len(log.rows), "checkpoint": str(out / "checkpoint.bin")}


def evaluate_checkpoint(ckpt: Checkpoint, env, episodes: int, actor: str = "target") -> dict:
    from .learner import evaluate
    check_compatible(ckpt.net, env)
    net = eval_net(ckpt.net, env)
    params = ckpt.params["actor_target" if actor == "target" else "actor"]
    return evaluate(net, params, env, episodes)


# -- guess table ---------------------------------------------------------

@dataclass
class GuessTableSpec:
    agents: tuple = (5, 10, 20)
    variants: tuple = ("bicnet", "commnet", "ind")
    episodes: int = 5000
    eval_steps: int = 10_000
    repetitions: int = 1
    seed: int = 0

    def __post_init__(self):
        if any(int(n) < 1 for n in self.agents):
            raise ValueError("agent counts must be >= 1")
        bad = [v for v in self.variants if v not in VARIANTS and v != SUPERVISED]
        if bad:
            raise ValueError(f"unknown variants {bad}")
        if self.repetitions < 1 or self.eval_steps < 1:
            raise ValueError("repetitions and eval_steps must be >= 1")


SUPERVISED = "sl-mlp"


def guess_cell(n: int, variant: str, episodes: int, eval_steps: int, seed: int, eval_seed: int,
               callback=None) -> np.ndarray:
    """Train one (n, variant) learner and return its per-step |action - target| errors.

    ``sl-mlp`` is the supervised ceiling: ``episodes`` Adam steps on minibatches of 32.
    """
    if variant == SUPERVISED:
        mlp = train_supervised(n, episodes, np.random.default_rng(seed), truncated_normal)
        x = truncated_normal(np.random.default_rng(eval_seed), eval_steps * n).reshape(eval_steps, n)
        return np.repeat(np.abs(mlp.predict(x) - x.sum(1)), n)
    cfg = guess_config(n, variant, seed, episodes)
    env = make_env(cfg["env"], seed)
    net = net_config_for(env, cfg)
    _, learner = train(train_config(cfg), env, variant, net=net, callback=callback)
    test = GuessEnv(n, seed=eval_seed)
    errs = np.empty((eval_steps, n))
    for k in range(eval_steps):
        shared, local = test.reset()
        a = nets.actor_forward(learner.net, learner.actor_target, shared, local)
        errs[k] = np.abs(a.ravel() - test.target)
    return errs.ravel()


def welch_t(a: np.ndarray, b: np.ndarray) -> float:
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    return float((a.mean() - b.mean()) / math.sqrt(va + vb)) if va + vb > 0 else 0.0


def guess_table(spec: GuessTableSpec, progress=None) -> tuple[list[dict], list[dict]]:
    """Rows keyed by agent count with ``mean ± std`` cells, plus t statistics per row."""
    ss = np.random.SeedSequence(spec.seed)
    rows, stats = [], []
    for n in spec.agents:
        errors = {}
        for v in spec.variants:
            pooled = []
            for rep in range(spec.repetitions):
                child = ss.spawn(1)[0]
                s_train, s_eval = (int(x) for x in child.generate_state(2) % (2 ** 31))
                pooled.append(guess_cell(int(n), v, spec.episodes, spec.eval_steps, s_train, s_eval))
                if progress:
                    progress(n, v, rep, float(pooled[-1].mean()))
            errors[v] = np.concatenate(pooled)
        row = {"agents": int(n)}
        for v in spec.variants:
            row[v] = f"{errors[v].mean():.4f} ± {errors[v].std():.4f}"
        rows.append(row)
        ranked = sorted(spec.variants, key=lambda v: errors[v].mean())
        if len(ranked) >= 2:
            stats.append({"agents": int(n), "best": ranked[0], "second": ranked[1],
                          "t_statistic": round(welch_t(errors[ranked[0]], errors[ranked[1]]), 6)})
    return rows, stats


def write_table(path: str | Path, rows: list[dict], columns: Sequence[str]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
