"""BiCNet actor and critic, plus the baseline communication schemes.

Every agent runs the same embed -> communicate -> head pipeline with
parameters shared per unit type.  Inputs are batch-first:
``shared_obs (B, S)``, ``local_obs (B, N, L)``, ``actions (B, N, A)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tape, Var

COMM_MODES = ("birnn", "none", "fully-connected", "mean", "greedy-mdp")
N_INDEPENDENT_MODES = ("birnn", "none", "mean", "greedy-mdp")

Params = dict  # name -> float64 array, insertion order is the manifest order


@dataclass(frozen=True)
class NetConfig:
    shared_dim: int
    local_dim: int
    action_dim: int
    embed_hidden: tuple = (64,)
    rnn_hidden: int = 32
    head_hidden: tuple = (32,)
    comm: str = "birnn"
    # agent index -> unit type id; None means a single type 0 for any N
    type_groups: tuple | None = None
    # fully-connected only: team size fixed when the net is built
    n_agents: int | None = None
    action_low: tuple = ()
    action_high: tuple = ()
    # observations are multiplied by obs_scale before the embedding; unbounded
    # action components are emitted as action_scale * z and fed to the critic
    # divided by action_scale
    obs_scale: float = 1.0
    action_scale: float = 1.0
    rnn_init: str = "gaussian"   # recurrent weight init: gaussian | orthogonal | identity
    # critic recurrent width; None reuses rnn_hidden
    critic_rnn_hidden: int | None = None

    def __post_init__(self):
        if self.comm not in COMM_MODES:
            raise ValueError(f"unknown comm mode {self.comm!r}; expected one of {COMM_MODES}")
        sizes = [self.shared_dim, self.local_dim]
        if min(sizes) < 0 or self.action_dim <= 0 or self.rnn_hidden <= 0 \
                or (self.critic_rnn_hidden is not None and self.critic_rnn_hidden <= 0):
            raise ValueError("dimensions must be positive")
        if any(h <= 0 for h in (*self.embed_hidden, *self.head_hidden)) or not self.embed_hidden:
            raise ValueError("hidden sizes must be positive and embed_hidden non-empty")
        if self.comm == "fully-connected" and not self.n_agents:
            raise ValueError("fully-connected communication needs n_agents")
        if self.type_groups is not None and self.n_agents is not None \
                and len(self.type_groups) != self.n_agents:
            raise ValueError("type_groups must cover every agent index")
        if len(self.action_low) != len(self.action_high):
            raise ValueError("action_low and action_high lengths differ")
        if self.action_low and len(self.action_low) != self.action_dim:
            raise ValueError("action bounds must have action_dim entries")

    @property
    def type_ids(self) -> tuple:
        return tuple(sorted(set(self.type_groups))) if self.type_groups else (0,)

    def hidden_for(self, role: str) -> int:
        if role == "critic" and self.critic_rnn_hidden is not None:
            return self.critic_rnn_hidden
        return self.rnn_hidden

    @property
    def embed_dim(self) -> int:
        return self.embed_hidden[-1]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.action_low:
            inf = np.full(self.action_dim, np.inf)
            return -inf, inf
        return np.array(self.action_low, float), np.array(self.action_high, float)

    def agent_types(self, n: int) -> list[int]:
        if self.type_groups is None:
            return [0] * n
        if len(self.type_groups) != n:
            raise ShapeError(f"type_groups covers {len(self.type_groups)} agents, got {n}")
        return list(self.type_groups)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetConfig":
        d = dict(d)
        for k in ("embed_hidden", "head_hidden", "type_groups", "action_low", "action_high"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


# -- parameter construction ---------------------------------------------

def _dense(rng, fan_in, fan_out, small=False):
    if small:
        W = rng.uniform(-3e-3, 3e-3, size=(fan_in, fan_out))
    else:
        W = rng.normal(0.0, 1.0 / np.sqrt(max(fan_in, 1)), size=(fan_in, fan_out))
    return W, np.zeros(fan_out)


def _recurrent_init(rng, H, kind):
    if kind == "identity":
        return np.eye(H)
    if kind == "orthogonal":
        q, r = np.linalg.qr(rng.normal(size=(H, H)))
        return q * np.sign(np.diag(r))
    W, _ = _dense(rng, H, H)
    return W


def _head_input_dim(cfg: NetConfig, H: int) -> int:
    E = cfg.embed_dim
    return {
        "birnn": E + 2 * H,
        "none": E,
        "mean": 2 * E,
        "fully-connected": 2 * E,
        "greedy-mdp": E + cfg.action_dim,
    }[cfg.comm]


def init_params(cfg: NetConfig, role: str, rng: np.random.Generator) -> Params:
    """Fresh parameters for ``role`` in {"actor", "critic"}."""
    if role not in ("actor", "critic"):
        raise ValueError(f"role must be actor or critic, got {role!r}")
    in_dim = cfg.shared_dim + cfg.local_dim + (cfg.action_dim if role == "critic" else 0)
    out_dim = cfg.action_dim if role == "actor" else 1
    E, H = cfg.embed_dim, cfg.hidden_for(role)
    p: Params = {}
    for t in cfg.type_ids:
        d = in_dim
        for k, width in enumerate(cfg.embed_hidden):
            p[f"t{t}/embed{k}/W"], p[f"t{t}/embed{k}/b"] = _dense(rng, d, width)
            d = width
        if cfg.comm == "birnn":
            for direction in ("fwd", "bwd"):
                Wx, b = _dense(rng, E, H)
                Wh = _recurrent_init(rng, H, cfg.rnn_init)
                p[f"t{t}/rnn_{direction}/Wx"] = Wx
                p[f"t{t}/rnn_{direction}/Wh"] = Wh
                p[f"t{t}/rnn_{direction}/b"] = b
        d = _head_input_dim(cfg, H)
        for k, width in enumerate(cfg.head_hidden):
            p[f"t{t}/head{k}/W"], p[f"t{t}/head{k}/b"] = _dense(rng, d, width)
            d = width
        p[f"t{t}/out/W"], p[f"t{t}/out/b"] = _dense(rng, d, out_dim, small=True)
    if cfg.comm == "fully-connected":
        p["comm/fc/W"], p["comm/fc/b"] = _dense(rng, cfg.n_agents * E, E)
    return p


def param_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def bind(tape: Tape, params: Mapping[str, np.ndarray], trainable: bool = True) -> dict[str, Var]:
    """Put parameters on a tape; only trainable ones are registered for backward()."""
    if trainable:
        return {k: tape.param(k, v) for k, v in params.items()}
    return {k: tape.constant(v) for k, v in params.items()}


# -- graph construction --------------------------------------------------

@dataclass
class NetOutput:
    values: list            # per agent, Var of shape (B, out_dim)
    hidden_fwd: list = field(default_factory=list)
    hidden_bwd: list = field(default_factory=list)
    embeddings: list = field(default_factory=list)


def _mlp(x: Var, pv, prefix: str, n_layers: int) -> Var:
    for k in range(n_layers):
        x = ad.relu(x @ pv[f"{prefix}{k}/W"] + pv[f"{prefix}{k}/b"])
    return x


def _squash(z: Var, cfg: NetConfig) -> Var:
    low, high = cfg.bounds()
    if not np.isfinite(low).any() and not np.isfinite(high).any():
        return z if cfg.action_scale == 1.0 else z * cfg.action_scale
    parts = []
    for c in range(cfg.action_dim):
        zc = ad.slice_(z, 1, c, c + 1)
        lo, hi = low[c], high[c]
        if not (np.isfinite(lo) and np.isfinite(hi)):
            parts.append(zc if cfg.action_scale == 1.0 else zc * cfg.action_scale)
        elif lo == -hi:
            parts.append(ad.tanh(zc) * hi)
        elif lo == 0.0:
            parts.append(ad.sigmoid(zc) * (hi - lo))
        else:
            parts.append(ad.sigmoid(zc) * (hi - lo) + np.array([lo]))
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


def _action_norm(cfg: NetConfig) -> tuple[np.ndarray, np.ndarray] | None:
    """Affine map sending bounded action components to [-1, 1] for the critic."""
    low, high = cfg.bounds()
    if not np.isfinite(low).any() and cfg.action_scale == 1.0:
        return None
    finite = np.isfinite(low) & np.isfinite(high)
    mid = np.zeros(cfg.action_dim)
    half = np.full(cfg.action_dim, float(cfg.action_scale))
    mid[finite] = 0.5 * (low[finite] + high[finite])
    half[finite] = 0.5 * (high[finite] - low[finite])
    return 1.0 / half, -mid / half


def _check_inputs(cfg: NetConfig, shared, local):
    shared = np.asarray(shared, dtype=float)
    local = np.asarray(local, dtype=float)
    if local.ndim != 3:
        raise ShapeError(f"local_obs must be (B, N, L), got {local.shape}")
    B, N, L = local.shape
    if N == 0:
        raise ShapeError("at least one agent is required")
    if L != cfg.local_dim:
        raise ShapeError(f"local_obs dim {L} != configured {cfg.local_dim}")
    if shared.shape != (B, cfg.shared_dim):
        raise ShapeError(f"shared_obs shape {shared.shape} != ({B}, {cfg.shared_dim})")
    if cfg.comm == "fully-connected" and N != cfg.n_agents:
        raise ShapeError(f"fully-connected net built for N={cfg.n_agents}, got N={N}")
    return shared, local


def net_graph(cfg: NetConfig, pv: Mapping[str, Var], shared_obs, local_obs, tape: Tape,
              actions=None, agent_types: Sequence[int] | None = None) -> NetOutput:
    """Build the actor graph (``actions is None``) or the critic graph.

    ``actions`` for the critic is either an array (B, N, A) or a list of
    per-agent Vars of shape (B, A).
    """
    shared, local = _check_inputs(cfg, shared_obs, local_obs)
    B, N, _ = local.shape
    role = "actor" if actions is None else "critic"
    types = list(agent_types) if agent_types is not None else cfg.agent_types(N)
    if len(types) != N:
        raise ShapeError(f"{len(types)} agent types for {N} agents")
    for t in set(types):
        if f"t{t}/out/W" not in pv:
            raise KeyError(f"no parameters for unit type {t}")

    act_vars = None
    if role == "critic":
        if isinstance(actions, (list, tuple)):
            act_vars = [tape.lift(a) for a in actions]
        else:
            arr = np.asarray(actions, dtype=float)
            if arr.shape != (B, N, cfg.action_dim):
                raise ShapeError(f"actions shape {arr.shape} != ({B}, {N}, {cfg.action_dim})")
            act_vars = [tape.constant(arr[:, i, :]) for i in range(N)]
        for a in act_vars:
            if a.shape != (B, cfg.action_dim):
                raise ShapeError(f"per-agent action shape {a.shape} != ({B}, {cfg.action_dim})")
        norm = _action_norm(cfg)
        if norm is not None:
            act_in = [a * norm[0] + norm[1] for a in act_vars]
        else:
            act_in = act_vars

    # group agents by type, keeping canonical order inside each group
    groups: dict[int, list[int]] = {}
    for i, t in enumerate(types):
        groups.setdefault(t, []).append(i)

    n_embed = len(cfg.embed_hidden)
    emb: list = [None] * N
    pre = {"fwd": [None] * N, "bwd": [None] * N}
    for t, members in groups.items():
        obs = np.concatenate(
            [np.concatenate([shared, local[:, i, :]], axis=1) for i in members], axis=0)
        x = tape.constant(obs if cfg.obs_scale == 1.0 else obs * cfg.obs_scale)
        if role == "critic":
            a_stack = act_in[members[0]] if len(members) == 1 else ad.concat(
                [act_in[i] for i in members], axis=0)
            x = ad.concat([x, a_stack], axis=1)
        E_t = _mlp(x, pv, f"t{t}/embed", n_embed)
        if cfg.comm == "birnn":
            P = {d: E_t @ pv[f"t{t}/rnn_{d}/Wx"] + pv[f"t{t}/rnn_{d}/b"] for d in ("fwd", "bwd")}
        for slot, i in enumerate(members):
            if len(members) == 1:
                emb[i] = E_t
                if cfg.comm == "birnn":
                    pre["fwd"][i], pre["bwd"][i] = P["fwd"], P["bwd"]
            else:
                lo, hi = slot * B, (slot + 1) * B
                emb[i] = ad.slice_(E_t, 0, lo, hi)
                if cfg.comm == "birnn":
                    pre["fwd"][i] = ad.slice_(P["fwd"], 0, lo, hi)
                    pre["bwd"][i] = ad.slice_(P["bwd"], 0, lo, hi)

    out = NetOutput(values=[None] * N, embeddings=emb)

    def head(i: int, comm_in: list) -> Var:
        t = types[i]
        x = emb[i] if not comm_in else ad.concat([emb[i], *comm_in], axis=1)
        x = _mlp(x, pv, f"t{t}/head", len(cfg.head_hidden))
        z = x @ pv[f"t{t}/out/W"] + pv[f"t{t}/out/b"]
        return _squash(z, cfg) if role == "actor" else z

    if cfg.comm == "birnn":
        hf: list = [None] * N
        hb: list = [None] * N
        for i in range(N):
            p = pre["fwd"][i]
            if i > 0:
                p = p + hf[i - 1] @ pv[f"t{types[i]}/rnn_fwd/Wh"]
            hf[i] = ad.tanh(p)
        for i in range(N - 1, -1, -1):
            p = pre["bwd"][i]
            if i < N - 1:
                p = p + hb[i + 1] @ pv[f"t{types[i]}/rnn_bwd/Wh"]
            hb[i] = ad.tanh(p)
        out.hidden_fwd, out.hidden_bwd = hf, hb
        for i in range(N):
            out.values[i] = head(i, [hf[i], hb[i]])
    elif cfg.comm == "none":
        for i in range(N):
            out.values[i] = head(i, [])
    elif cfg.comm == "mean":
        m = emb[0]
        for i in range(1, N):
            m = m + emb[i]
        m = m * (1.0 / N)
        for i in range(N):
            out.values[i] = head(i, [m])
    elif cfg.comm == "fully-connected":
        allE = emb[0] if N == 1 else ad.concat(emb, axis=1)
        msg = allE @ pv["comm/fc/W"] + pv["comm/fc/b"]
        for i in range(N):
            out.values[i] = head(i, [msg])
    elif cfg.comm == "greedy-mdp":
        # agent i sees the mean action of agents 1..i-1 (zeros for the first)
        running = None
        for i in range(N):
            prev = tape.constant(np.zeros((B, cfg.action_dim))) if running is None \
                else running * (1.0 / i)
            out.values[i] = head(i, [prev])
            a_i = out.values[i] if role == "actor" else act_vars[i]
            running = a_i if running is None else running + a_i
    return out


def comm_layer_forward(mode: str, embeddings: Sequence[np.ndarray], W: np.ndarray | None = None,
                       b: np.ndarray | None = None, n_built: int | None = None,
                       prev_actions: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Reference evaluation of the non-recurrent communication layers.

    Returns the head inputs per agent.  birnn lives inside :func:`net_graph`.
    """
    N = len(embeddings)
    if N == 0:
        raise ShapeError("at least one agent is required")
    e = [np.asarray(x, dtype=float) for x in embeddings]
    if mode == "none":
        return [x.copy() for x in e]
    if mode == "mean":
        m = sum(e) / N
        return [np.concatenate([x, m], axis=-1) for x in e]
    if mode == "fully-connected":
        if n_built is not None and N != n_built:
            raise ShapeError(f"fully-connected layer built for N={n_built}, got N={N}")
        msg = np.concatenate(e, axis=-1) @ W + b
        return [np.concatenate([x, msg], axis=-1) for x in e]
    if mode == "greedy-mdp":
        outs = []
        for i, x in enumerate(e):
            prev = np.zeros_like(prev_actions[0]) if i == 0 else sum(prev_actions[:i]) / i
            outs.append(np.concatenate([x, prev], axis=-1))
        return outs
    if mode == "birnn":
        raise ValueError("birnn communication is computed inside the actor/critic graph")
    raise ValueError(f"unknown comm mode {mode!r}")


def _batched(shared_obs, local_obs, actions=None):
    local = np.asarray(local_obs, dtype=float)
    single = local.ndim == 2
    if single:
        local = local[None]
        shared = np.asarray(shared_obs, dtype=float).reshape(1, -1)
        if actions is not None:
            actions = np.asarray(actions, dtype=float)[None]
    else:
        shared = np.asarray(shared_obs, dtype=float)
    return single, shared, local, actions


def actor_forward(cfg: NetConfig, params: Mapping[str, np.ndarray], shared_obs, local_obs,
                  agent_types=None, return_hidden: bool = False):
    """Greedy actions as an array (B, N, A), or (N, A) for unbatched input."""
    single, shared, local, _ = _batched(shared_obs, local_obs)
    tape = Tape(strict=False)
    out = net_graph(cfg, bind(tape, params, trainable=False), shared, local, tape,
                    agent_types=agent_types)
    acts = np.stack([v.value for v in out.values], axis=1)
    if not np.isfinite(acts).all():
        raise NonFiniteError("actor produced non-finite actions")
    if single:
        acts = acts[0]
    if not return_hidden:
        return acts
    hidden = None
    if out.hidden_fwd:
        hidden = (np.stack([h.value for h in out.hidden_fwd], axis=1),
                  np.stack([h.value for h in out.hidden_bwd], axis=1))
        if single:
            hidden = (hidden[0][0], hidden[1][0])
    return acts, hidden


def critic_forward(cfg: NetConfig, params: Mapping[str, np.ndarray], shared_obs, local_obs,
                   actions, agent_types=None) -> np.ndarray:
    """Per-agent Q values as (B, N), or (N,) for unbatched input."""
    single, shared, local, actions = _batched(shared_obs, local_obs, actions)
    tape = Tape(strict=False)
    out = net_graph(cfg, bind(tape, params, trainable=False), shared, local, tape,
                    actions=actions, agent_types=agent_types)
    q = np.concatenate([v.value for v in out.values], axis=1)
    if not np.isfinite(q).all():
        raise NonFiniteError("critic produced non-finite values")
    return q[0] if single else q


def soft_update(target: Mapping[str, np.ndarray], online: Mapping[str, np.ndarray],
                tau: float) -> Params:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if target.keys() != online.keys():
        raise KeyError("target and online parameter names differ")
    out = {}
    for k, t in target.items():
        o = online[k]
        if o.shape != t.shape:
            raise ShapeError(f"soft_update: {k!r} target {t.shape} vs online {o.shape}")
        out[k] = tau * o + (1.0 - tau) * t
    return out


# -- serialization -------------------------------------------------------

MAGIC = b"BICNET-PARAMS 1\n"


class ManifestError(ValueError):
    pass


def manifest(params: Mapping[str, np.ndarray]) -> list[tuple[str, tuple]]:
    return [(k, tuple(v.shape)) for k, v in params.items()]


def params_serialize(params: Mapping[str, np.ndarray]) -> bytes:
    """Text manifest, then little-endian float64 data in manifest order.

    Layout: magic line, ``count <n>``, one ``<name> <d0>x<d1>...`` line per
    array, ``sha256 <hex of data>``, ``end``, raw data.
    """
    data = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    lines = [f"count {len(params)}"]
    for name, shape in manifest(params):
        if " " in name:
            raise ValueError(f"parameter names may not contain spaces: {name!r}")
        lines.append(f"{name} {'x'.join(str(d) for d in shape)}")
    lines.append(f"sha256 {hashlib.sha256(data).hexdigest()}")
    lines.append("end")
    return MAGIC + ("\n".join(lines) + "\n").encode("ascii") + data


def _parse_header(blob: bytes):
    if not blob.startswith(MAGIC):
        raise ManifestError("not a parameter image (bad magic)")
    pos = len(MAGIC)
    entries, digest = [], None

    def readline():
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise ManifestError("truncated manifest")
        line = blob[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        return line

    head = readline().split()
    if len(head) != 2 or head[0] != "count":
        raise ManifestError("malformed manifest header")
    for _ in range(int(head[1])):
        parts = readline().split()
        if len(parts) != 2:
            raise ManifestError("malformed manifest entry")
        try:
            shape = tuple(int(d) for d in parts[1].split("x"))
        except ValueError:
            raise ManifestError(f"malformed shape for {parts[0]!r}") from None
        entries.append((parts[0], shape))
    parts = readline().split()
    if len(parts) != 2 or parts[0] != "sha256":
        raise ManifestError("missing checksum line")
    digest = parts[1]
    if readline() != "end":
        raise ManifestError("missing end marker")
    return entries, digest, pos


def params_deserialize(blob: bytes, expected: Mapping[str, np.ndarray] | Sequence | None = None
                       ) -> Params:
    """Inverse of :func:`params_serialize`.

    ``expected`` is either a parameter dict built from the intended config or
    its :func:`manifest`; the stored manifest must match it entry by entry.
    """
    entries, digest, pos = _parse_header(blob)
    if expected is not None:
        want = manifest(expected) if isinstance(expected, Mapping) else list(expected)
        for k, (got, exp) in enumerate(zip(entries, want)):
            if got != exp:
                raise ManifestError(f"manifest entry {k}: stored {got[0]} {got[1]}, "
                                    f"config expects {exp[0]} {exp[1]}")
        if len(entries) != len(want):
            raise ManifestError(f"stored manifest has {len(entries)} arrays, config expects {len(want)}")
    sizes = [int(np.prod(s)) for _, s in entries]
    data = blob[pos:]
    if len(data) != 8 * sum(sizes):
        raise ManifestError(f"data section holds {len(data)} bytes, manifest needs {8 * sum(sizes)}")
    if hashlib.sha256(data).hexdigest() != digest:
        raise ManifestError("checksum mismatch: parameter data is corrupted")
    out: Params = {}
    off = 0
    for (name, shape), n in zip(entries, sizes):
        out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    return out


def flat(params: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([v.ravel() for v in params.values()]) if params else np.zeros(0)

