import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bicnet import autodiff as ad
from bicnet import nets
from bicnet.autodiff import AdamState, ShapeError, Tape
from bicnet.nets import ManifestError, NetConfig

BOUNDS = dict(action_low=(0.0, -np.pi, 0.0), action_high=(1.0, np.pi, 10.0))


def cfg_for(comm="birnn", n=None, **kw):
    base = dict(shared_dim=4, local_dim=3, action_dim=3, embed_hidden=(6,), rnn_hidden=4, head_hidden=(5,),
                comm=comm, n_agents=n if comm == "fully-connected" else None, **BOUNDS)
    base.update(kw)
    return NetConfig(**base)


def random_params(cfg, role, seed=0):
    rng = np.random.default_rng(seed)
    p = nets.init_params(cfg, role, rng)
    for k in p:
        p[k] = rng.normal(0, 0.6, p[k].shape)
    return p


def obs(cfg, n, batch=2, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(batch, cfg.shared_dim)), rng.normal(size=(batch, n, cfg.local_dim))


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def reference_birnn(cfg, p, shared, local, actions=None):
    """Plain numpy re-derivation of the bidirectional actor/critic, one type, one hidden layer each."""
    B, N, _ = local.shape
    e = []
    for i in range(N):
        x = np.concatenate([shared, local[:, i]], axis=1)
        if actions is not None:
            lo, hi = np.array(cfg.action_low), np.array(cfg.action_high)
            x = np.concatenate([x, (actions[:, i] - (lo + hi) / 2) / ((hi - lo) / 2)], axis=1)
        e.append(relu(x @ p["t0/embed0/W"] + p["t0/embed0/b"]))
    H = cfg.rnn_hidden
    hf, hb = [None] * N, [None] * N
    h = np.zeros((B, H))
    for i in range(N):
        h = np.tanh(e[i] @ p["t0/rnn_fwd/Wx"] + h @ p["t0/rnn_fwd/Wh"] + p["t0/rnn_fwd/b"])
        hf[i] = h
    h = np.zeros((B, H))
    for i in reversed(range(N)):
        h = np.tanh(e[i] @ p["t0/rnn_bwd/Wx"] + h @ p["t0/rnn_bwd/Wh"] + p["t0/rnn_bwd/b"])
        hb[i] = h
    out = []
    for i in range(N):
        z = relu(np.concatenate([e[i], hf[i], hb[i]], axis=1) @ p["t0/head0/W"] + p["t0/head0/b"])
        z = z @ p["t0/out/W"] + p["t0/out/b"]
        if actions is None:
            z = np.stack([sigmoid(z[:, 0]), np.pi * np.tanh(z[:, 1]), 10 * sigmoid(z[:, 2])], axis=1)
        out.append(z)
    return np.stack(out, axis=1)


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_actor_matches_numpy_reference(n, seed):
    cfg = cfg_for()
    p = random_params(cfg, "actor", seed)
    shared, local = obs(cfg, n, seed=seed + 1)
    np.testing.assert_allclose(nets.actor_forward(cfg, p, shared, local), reference_birnn(cfg, p, shared, local),
                               rtol=1e-12, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_critic_matches_numpy_reference(n, seed):
    cfg = cfg_for()
    p = random_params(cfg, "critic", seed)
    shared, local = obs(cfg, n, seed=seed + 1)
    rng = np.random.default_rng(seed)
    acts = rng.uniform(cfg.action_low, cfg.action_high, (2, n, 3))
    q = nets.critic_forward(cfg, p, shared, local, acts)
    np.testing.assert_allclose(q, reference_birnn(cfg, p, shared, local, acts)[..., 0], rtol=1e-12, atol=1e-12)


def test_single_agent_uses_one_cell_each_way():
    cfg = cfg_for()
    p = random_params(cfg, "actor")
    shared, local = obs(cfg, 1)
    e = relu(np.concatenate([shared, local[:, 0]], 1) @ p["t0/embed0/W"] + p["t0/embed0/b"])
    hf = np.tanh(e @ p["t0/rnn_fwd/Wx"] + p["t0/rnn_fwd/b"])
    hb = np.tanh(e @ p["t0/rnn_bwd/Wx"] + p["t0/rnn_bwd/b"])
    z = relu(np.concatenate([e, hf, hb], 1) @ p["t0/head0/W"] + p["t0/head0/b"]) @ p["t0/out/W"] + p["t0/out/b"]
    got = nets.actor_forward(cfg, p, shared, local)[:, 0]
    np.testing.assert_allclose(got[:, 0], sigmoid(z[:, 0]), rtol=1e-13)


def test_zero_weights_give_midpoint_actions():
    cfg = cfg_for()
    p = {k: np.zeros_like(v) for k, v in nets.init_params(cfg, "actor", np.random.default_rng(0)).items()}
    shared, local = obs(cfg, 4)
    a = nets.actor_forward(cfg, p, shared, local)
    np.testing.assert_array_equal(a[..., 0], 0.5)
    np.testing.assert_array_equal(a[..., 1], 0.0)
    np.testing.assert_array_equal(a[..., 2], 5.0)


def test_permuting_agents_changes_outputs():
    cfg = cfg_for()
    p = random_params(cfg, "actor")
    shared, local = obs(cfg, 3)
    a = nets.actor_forward(cfg, p, shared, local)
    swapped = local[:, [0, 2, 1]]
    b = nets.actor_forward(cfg, p, shared, swapped)
    # the chain is not symmetric, so swapped agents do not simply trade outputs
    assert not np.allclose(a[:, [0, 2, 1]], b)


def test_actions_stay_in_bounds():
    cfg = cfg_for()
    p = random_params(cfg, "actor")
    p["t0/out/W"] *= 50
    shared, local = obs(cfg, 5, batch=20)
    a = nets.actor_forward(cfg, p, shared, local)
    lo, hi = cfg.bounds()
    assert (a >= lo).all() and (a <= hi).all()


def action_jacobian(cfg, p, shared, local, acts):
    """dQ_i/da_j by autodiff, shape (N, N, A)."""
    N = local.shape[1]
    J = np.zeros((N, N, cfg.action_dim))
    for i in range(N):
        t = Tape()
        pv = nets.bind(t, p, trainable=False)
        av = [t.constant(acts[:, j]) for j in range(N)]
        q = nets.net_graph(cfg, pv, shared, local, t, actions=av).values[i]
        for j, g in enumerate(ad.grad_wrt(t, ad.sum_(q), av)):
            J[i, j] = g[0]
    return J


def test_critic_action_gradient_crosses_agents():
    cfg = cfg_for()
    p = random_params(cfg, "critic")
    shared, local = obs(cfg, 3, batch=1)
    acts = np.random.default_rng(2).uniform(cfg.action_low, cfg.action_high, (1, 3, 3))
    J = action_jacobian(cfg, p, shared, local, acts)
    # finite-difference oracle on one off-diagonal entry
    h = 1e-5
    up, dn = acts.copy(), acts.copy()
    up[0, 2, 1] += h
    dn[0, 2, 1] -= h
    fd = (nets.critic_forward(cfg, p, shared, local, up)[0, 0] - nets.critic_forward(cfg, p, shared, local, dn)[0, 0]) / (2 * h)
    assert abs(J[0, 2, 1] - fd) < 1e-7
    off = [np.abs(J[i, j]).max() for i in range(3) for j in range(3) if i != j]
    assert min(off) > 1e-12


def test_independent_critic_has_no_cross_gradient():
    cfg = cfg_for("none")
    p = random_params(cfg, "critic")
    shared, local = obs(cfg, 3, batch=1)
    acts = np.random.default_rng(2).uniform(cfg.action_low, cfg.action_high, (1, 3, 3))
    J = action_jacobian(cfg, p, shared, local, acts)
    for i in range(3):
        for j in range(3):
            if i != j:
                np.testing.assert_array_equal(J[i, j], 0.0)
    assert np.abs(J[0, 0]).max() > 0


def test_every_output_depends_on_every_input():
    cfg = cfg_for()
    p = random_params(cfg, "actor")
    shared, local = obs(cfg, 4, batch=1)
    base = nets.actor_forward(cfg, p, shared, local)
    for j in range(4):
        bumped = local.copy()
        bumped[0, j] += 1e-3
        diff = np.abs(nets.actor_forward(cfg, p, shared, bumped) - base).max(axis=2)[0]
        assert (diff > 0).all(), f"perturbing agent {j} left some agent unchanged"


# -- communication layers ------------------------------------------------

def test_comm_mean_identical_embeddings():
    e = np.array([[1.0, -2.0]])
    for x in nets.comm_layer_forward("mean", [e, e, e]):
        np.testing.assert_array_equal(x, np.concatenate([e, e], axis=1))


def test_comm_none_is_identity():
    es = [np.array([[1.0]]), np.array([[2.0]])]
    out = nets.comm_layer_forward("none", es)
    assert all(np.array_equal(a, b) for a, b in zip(out, es))


def test_comm_mean_two_agents():
    out = nets.comm_layer_forward("mean", [np.array([2.0]), np.array([4.0])])
    assert out[0][1] == 3.0 and out[1][1] == 3.0


def test_comm_fc_rejects_other_team_size():
    W, b = np.ones((3, 1)), np.zeros(1)
    nets.comm_layer_forward("fully-connected", [np.ones(1)] * 3, W, b, n_built=3)
    with pytest.raises(ShapeError):
        nets.comm_layer_forward("fully-connected", [np.ones(1)] * 2, W, b, n_built=3)
    cfg = cfg_for("fully-connected", n=3)
    p = random_params(cfg, "actor")
    shared, local = obs(cfg, 4)
    with pytest.raises(ShapeError):
        nets.actor_forward(cfg, p, shared, local)


def test_comm_greedy_sees_previous_actions():
    acts = [np.array([1.0]), np.array([3.0]), np.array([8.0])]
    out = nets.comm_layer_forward("greedy-mdp", [np.zeros(1)] * 3, prev_actions=acts)
    assert [o[1] for o in out] == [0.0, 1.0, 2.0]


@pytest.mark.parametrize("comm", ["none", "mean", "fully-connected", "greedy-mdp"])
def test_graph_matches_reference_comm_layer(comm):
    cfg = cfg_for(comm, n=3, head_hidden=())
    p = random_params(cfg, "actor")
    shared, local = obs(cfg, 3, batch=1)
    t = Tape()
    out = nets.net_graph(cfg, nets.bind(t, p, False), shared, local, t)
    emb = [e.value for e in out.embeddings]
    prev = [v.value for v in out.values]
    ref = nets.comm_layer_forward(comm, emb, p.get("comm/fc/W"), p.get("comm/fc/b"), 3, prev)
    for i in range(3):
        z = ref[i] @ p["t0/out/W"] + p["t0/out/b"]
        a = np.array([sigmoid(z[0, 0]), np.pi * np.tanh(z[0, 1]), 10 * sigmoid(z[0, 2])])
        np.testing.assert_allclose(out.values[i].value[0], a, rtol=1e-12)


@pytest.mark.parametrize("comm", nets.N_INDEPENDENT_MODES)
def test_parameter_count_independent_of_team_size(comm):
    counts = []
    for n in (3, 10):
        cfg = cfg_for(comm)
        counts.append(nets.flat(nets.init_params(cfg, "actor", np.random.default_rng(0))).size)
        p = random_params(cfg, "actor")
        shared, local = obs(cfg, n)
        assert np.isfinite(nets.actor_forward(cfg, p, shared, local)).all()
    assert counts[0] == counts[1]


def test_type_groups_share_within_type():
    cfg = cfg_for(type_groups=(0, 0, 1))
    p = random_params(cfg, "actor")
    assert "t1/out/W" in p and "t0/out/W" in p
    shared, local = obs(cfg, 3, batch=1)
    local[:, 1] = local[:, 0]
    # agents 0 and 1 share parameters and inputs, but sit at different chain positions
    a = nets.actor_forward(cfg, p, shared, local, agent_types=[0, 0, 1])
    assert not np.allclose(a[0, 0], a[0, 1])
    with pytest.raises(KeyError):
        nets.actor_forward(cfg, p, shared, local, agent_types=[0, 2, 1])


# -- soft update & optimiser isolation -----------------------------------

def test_soft_update_examples():
    t, o = {"w": np.zeros(2)}, {"w": np.ones(2)}
    np.testing.assert_array_equal(nets.soft_update(t, o, 1.0)["w"], o["w"])
    np.testing.assert_array_equal(nets.soft_update(t, o, 0.0)["w"], t["w"])
    np.testing.assert_allclose(nets.soft_update(t, o, 0.01)["w"], 0.01)
    with pytest.raises(ShapeError):
        nets.soft_update(t, {"w": np.ones(3)}, 0.5)


def test_adam_on_online_leaves_target():
    cfg = cfg_for()
    online = random_params(cfg, "actor")
    target = {k: v.copy() for k, v in online.items()}
    snapshot = {k: v.copy() for k, v in target.items()}
    grads = {k: np.ones_like(v) for k, v in online.items()}
    online = ad.adam_step(AdamState(), online, grads)
    assert all(np.array_equal(target[k], snapshot[k]) for k in target)
    assert not np.array_equal(online["t0/out/b"], target["t0/out/b"])


# -- serialisation -------------------------------------------------------

def test_serialize_round_trip_is_bit_exact():
    cfg = cfg_for()
    p = random_params(cfg, "critic")
    blob = nets.params_serialize(p)
    back = nets.params_deserialize(blob, p)
    assert nets.params_serialize(back) == blob
    assert all(back[k].tobytes() == p[k].tobytes() for k in p)


def test_truncated_image_rejected():
    blob = nets.params_serialize(random_params(cfg_for(), "actor"))
    with pytest.raises(ManifestError):
        nets.params_deserialize(blob[:-5])
    with pytest.raises(ManifestError):
        nets.params_deserialize(blob[:20])


def test_wrong_shape_names_array():
    p = random_params(cfg_for(), "actor")
    q = dict(p)
    q["t0/head0/W"] = np.zeros((3, 3))
    with pytest.raises(ManifestError, match="t0/head0/W"):
        nets.params_deserialize(nets.params_serialize(q), p)


def test_corrupted_byte_rejected():
    blob = bytearray(nets.params_serialize(random_params(cfg_for(), "actor")))
    blob[-3] ^= 0x01
    with pytest.raises(ManifestError, match="checksum"):
        nets.params_deserialize(bytes(blob))


def test_net_config_dict_round_trip():
    cfg = cfg_for(type_groups=(0, 1, 1))
    assert NetConfig.from_dict(cfg.to_dict()) == cfg
