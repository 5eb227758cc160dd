import numpy as np
import pytest

from divrec.agent import (SENTINEL, AgentState, DDPGAgent, DDPGConfig, GaussianNoise, NetConfig,
                          ReplayBuffer, TrainLogSession, Transition, advance_recent, encode_state,
                          initial_recent, make_encoder, pretrain_actor, pretrain_pairs,
                          pretrain_targets, rollout_train_log)
from divrec.mf import MFConfig, extract_features, train_bprmf

from conftest import synthetic_dataset
from test_nn import gradient_check, rel_err

SMALL = NetConfig(d=4, ell=3, user_hidden=(6, 4), conv_channels=2, item_hidden=(6, 4),
                  actor_hidden=(6, 4), critic_hidden=(6, 4))


def unit_rows(rng, n, d):
    X = rng.normal(size=(n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def small_agent(seed=0, n_items=12, cfg=DDPGConfig(batch_size=8)):
    X = unit_rows(np.random.default_rng(seed + 100), n_items, SMALL.d)
    return DDPGAgent(X, SMALL, cfg, seed=seed)


def randomize_biases(net, rng):
    # zero biases put sentinel rows exactly on the ReLU kink
    for p in net.params:
        if p.ndim == 1:
            p[...] = rng.normal(scale=0.1, size=p.shape)
    net.touch()


def filled_buffer(agent, n=40, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(100, agent.net_cfg.d, agent.net_cfg.ell, rng)
    n_items = agent.padded.shape[0] - 1
    for _ in range(n):
        u = rng.normal(size=agent.net_cfg.d)
        s = tuple(int(i) for i in rng.integers(-1, n_items, agent.net_cfg.ell))
        s2 = tuple(int(i) for i in rng.integers(-1, n_items, agent.net_cfg.ell))
        buf.push(Transition(AgentState(u, s), rng.uniform(-1, 1, agent.net_cfg.d),
                            float(rng.integers(0, 6)), AgentState(u, s2)))
    return buf


def batch_inputs(agent, rng, b=3):
    n_items = agent.padded.shape[0] - 1
    return agent.inputs(rng.normal(size=(b, agent.net_cfg.d)),
                        rng.integers(-1, n_items, size=(b, agent.net_cfg.ell)))


def test_default_architecture_sizes():
    agent = DDPGAgent(unit_rows(np.random.default_rng(0), 50, 30), seed=0)
    rng = np.random.default_rng(1)
    x = batch_inputs(agent, rng)
    assert encode_state(agent.actor, x).shape == (3, 64)
    assert agent.actor(x).shape == (3, 30)
    # user MLP 30-64-32, conv 1->8 (2x30) and 8->8 (2x1), item MLP 24-64-32,
    # actor head 64-64-32-30, critic head 94-64-32-1
    encoder = (30 * 64 + 64 + 64 * 32 + 32) + (8 * 60 + 8 + 8 * 16 + 8) + (24 * 64 + 64 + 64 * 32 + 32)
    assert agent.actor.total_params == encoder + (64 * 64 + 64 + 64 * 32 + 32 + 32 * 30 + 30)
    assert agent.critic.total_params == encoder + (94 * 64 + 64 + 64 * 32 + 32 + 32 + 1)


def test_ell_below_two_is_rejected():
    with pytest.raises(ValueError):
        make_encoder(NetConfig(ell=1), np.random.default_rng(0))
    with pytest.raises(ValueError):
        AgentState(np.zeros(3), (1,))


def test_zero_inputs_depend_only_on_biases():
    agent = small_agent()
    enc = agent.actor.root.layers[0]
    for p in enc.params():
        if p.ndim == 1:
            p[...] = 0.3
    x = (np.zeros((1, SMALL.d)), np.zeros((1, 1, SMALL.ell, SMALL.d)))
    a = encode_state(agent.actor, x)
    W = [p for p in enc.params() if p.ndim > 1]
    for w in W:
        w *= 7.0  # rescaling weights must not matter when every input is zero
    agent.actor.touch()
    b = encode_state(agent.actor, x)
    # first layers see only biases; deeper layers still mix, so compare the bias-only case
    assert np.all(a >= 0) and a.shape == (1, 2 * SMALL.user_hidden[-1])
    zero_w = small_agent()
    for p in zero_w.actor.root.layers[0].params():
        p[...] = 0.0 if p.ndim > 1 else 0.3
    zero_w.actor.touch()
    np.testing.assert_allclose(encode_state(zero_w.actor, x), 0.3)
    assert b.shape == a.shape


def test_oldest_item_order_matters(rng):
    agent = small_agent()
    u = rng.normal(size=(1, SMALL.d))
    z1 = encode_state(agent.actor, agent.inputs(u, [[0, 1, 2]]))
    z2 = encode_state(agent.actor, agent.inputs(u, [[1, 0, 2]]))
    assert not np.allclose(z1, z2)


def test_actions_bounded_and_deterministic(rng):
    agent = small_agent()
    x = batch_inputs(agent, rng, 16)
    for p in agent.actor.params:
        p *= 50.0
    agent.actor.touch()
    a = agent.actor(x)
    assert np.all(np.abs(a) <= 1.0)
    assert agent.actor(x).tobytes() == a.tobytes()


def test_zero_weights_give_zero_action_and_value(rng):
    agent = small_agent()
    for net in (agent.actor, agent.critic):
        net.set_flat(np.zeros(net.total_params))
    x = batch_inputs(agent, rng)
    np.testing.assert_array_equal(agent.actor(x), 0.0)
    np.testing.assert_array_equal(agent.critic((x, rng.uniform(-1, 1, (3, SMALL.d)))), 0.0)


def test_full_network_gradients_match_finite_differences():
    for trial in range(20):
        rng = np.random.default_rng(trial)
        agent = small_agent(seed=trial)
        assert agent.actor.total_params <= 2000 and agent.critic.total_params <= 2000
        randomize_biases(agent.actor, rng)
        randomize_biases(agent.critic, rng)
        x = batch_inputs(agent, rng)
        g_actor, _ = gradient_check(agent.actor, x, rng)
        assert g_actor <= 1e-4, (trial, g_actor)
        a = rng.uniform(-1, 1, (3, SMALL.d))
        g_critic, g_inputs = gradient_check(agent.critic, (x, a), rng)
        assert g_critic <= 1e-4, (trial, g_critic)
        assert g_inputs <= 1e-4, (trial, g_inputs)


def test_dq_da_matches_finite_differences():
    for trial in range(20):
        rng = np.random.default_rng(50 + trial)
        agent = small_agent(seed=trial)
        randomize_biases(agent.critic, rng)
        x = batch_inputs(agent, rng, 2)
        a = rng.uniform(-1, 1, (2, SMALL.d))
        q, tape = agent.critic.forward((x, a))
        _, (_, ga) = agent.critic.backward(tape, np.ones_like(q))
        num = np.zeros_like(a)
        for idx in np.ndindex(*a.shape):
            e = np.zeros_like(a)
            e[idx] = 1e-4
            num[idx] = (agent.critic((x, a + e)).sum() - agent.critic((x, a - e)).sum()) / 2e-4
        assert rel_err(ga, num) <= 1e-4


def test_gamma_zero_targets_are_rewards():
    agent = small_agent(cfg=DDPGConfig(gamma=0.0, batch_size=8))
    batch = filled_buffer(agent).sample(8)
    np.testing.assert_array_equal(agent.targets(batch), batch["reward"])


def test_targets_use_target_networks():
    agent = small_agent()
    batch = filled_buffer(agent).sample(8)
    y0 = agent.targets(batch)
    expected = batch["reward"] + 0.95 * agent.target_critic(
        (agent.inputs(batch["n_user"], batch["n_recent"]),
         agent.target_actor(agent.inputs(batch["n_user"], batch["n_recent"]))))[:, 0]
    assert np.max(np.abs(y0 - expected)) <= 1e-12
    theta = agent.target_critic.get_flat()
    agent.target_critic.set_flat(theta + 0.1)
    assert not np.allclose(agent.targets(batch), y0)


def test_tau_zero_and_one():
    agent = small_agent(cfg=DDPGConfig(batch_size=8, tau=0.01))
    buf = filled_buffer(agent)
    agent.train_step(buf)  # make online and target differ
    frozen = {k: v.get_flat().tobytes() for k, v in agent.networks().items()}
    agent.soft_update_targets(0.0)
    assert agent.target_actor.get_flat().tobytes() == frozen["target_actor"]
    assert agent.target_critic.get_flat().tobytes() == frozen["target_critic"]
    agent.soft_update_targets(1.0)
    assert agent.target_actor.get_flat().tobytes() == agent.actor.get_flat().tobytes()
    assert agent.target_critic.get_flat().tobytes() == agent.critic.get_flat().tobytes()


def test_train_step_moves_online_nets_only_through_adam():
    agent = small_agent(cfg=DDPGConfig(batch_size=8, tau=0.5))
    buf = filled_buffer(agent)
    before = {k: v.get_flat() for k, v in agent.networks().items()}
    snapshot = {k: getattr(buf, k).copy() for k in ("s_user", "s_recent", "action", "reward")}
    diag = agent.train_step(buf)
    assert set(diag) == {"critic_loss", "actor_objective", "mean_reward"}
    after = {k: v.get_flat() for k, v in agent.networks().items()}
    assert not np.array_equal(before["actor"], after["actor"])
    assert not np.array_equal(before["critic"], after["critic"])
    # targets equal the tau-mix of their old value and the new online params
    np.testing.assert_allclose(after["target_actor"],
                               0.5 * after["actor"] + 0.5 * before["target_actor"], atol=1e-15)
    for k, v in snapshot.items():
        np.testing.assert_array_equal(getattr(buf, k), v)


def test_critic_update_leaves_targets_untouched():
    agent = small_agent()
    buf = filled_buffer(agent)
    ta, tc = agent.target_actor.get_flat(), agent.target_critic.get_flat()
    agent.critic_update(buf.sample(8))
    agent.actor_update(buf.sample(8))
    np.testing.assert_array_equal(agent.target_actor.get_flat(), ta)
    np.testing.assert_array_equal(agent.target_critic.get_flat(), tc)


def test_perfect_critic_has_zero_loss_and_zero_gradient():
    agent = small_agent(cfg=DDPGConfig(batch_size=8, gamma=0.0))
    # critic with zero weights predicts 0 for everything; zero rewards make it exact
    agent.critic.set_flat(np.zeros(agent.critic.total_params))
    buf = filled_buffer(agent)
    buf.reward[:] = 0.0
    before = agent.critic.get_flat()
    assert agent.critic_update(buf.sample(8)) == 0.0
    np.testing.assert_array_equal(agent.critic.get_flat(), before)


def test_actor_update_increases_q():
    agent = small_agent(cfg=DDPGConfig(batch_size=32, actor_lr=1e-3))
    batch = filled_buffer(agent).sample(32)
    x = agent.inputs(batch["s_user"], batch["s_recent"])
    q0 = float(np.mean(agent.critic((x, agent.actor(x)))))
    for _ in range(5):
        agent.actor_update(batch)
    assert float(np.mean(agent.critic((x, agent.actor(x))))) > q0


def test_nonfinite_critic_loss_is_flagged():
    agent = small_agent()
    buf = filled_buffer(agent)
    buf.reward[:] = np.nan
    agent.critic_update(buf.sample(8))
    assert agent.flags["nonfinite_critic"] == 1 and agent.numerical_flags == 1


def test_replay_buffer_capacity_and_unique_samples():
    agent = small_agent()
    buf = filled_buffer(agent, n=150)
    assert len(buf) == 100 and buf.cursor == 50
    for _ in range(50):
        idx = buf.sample(64)["index"]
        assert len(set(idx.tolist())) == 64
    with pytest.raises(ValueError):
        ReplayBuffer(10, 4, 3).sample(1)


def test_noise_clamp_decay_and_seed():
    n = GaussianNoise(0.0, rng=np.random.default_rng(0))
    a = np.array([0.3, -0.2])
    np.testing.assert_array_equal(n(a), a)

    class Fixed:
        def normal(self, loc, scale, size):
            return np.full(size, 0.5)

    clamp = GaussianNoise(1.0, rng=Fixed())
    assert clamp(np.array([0.99]))[0] == 1.0
    assert clamp.sigma == pytest.approx(0.9995)
    x = [GaussianNoise(rng=np.random.default_rng(5))(np.zeros(3)) for _ in range(2)]
    np.testing.assert_array_equal(x[0], x[1])
    floor = GaussianNoise(0.2, 0.5, 0.02, np.random.default_rng(0))
    for _ in range(20):
        floor(np.zeros(1))
    assert floor.sigma == 0.02


def test_recent_item_helpers():
    assert initial_recent([4, 5], 5) == (SENTINEL,) * 3 + (4, 5)
    assert initial_recent(range(10), 3) == (7, 8, 9)
    r = (1, 2, 3)
    assert advance_recent(r, []) == r
    assert advance_recent(r, [7, 8]) == (3, 7, 8)


def test_padding_row_is_zero(rng):
    agent = small_agent()
    _, X = agent.inputs(rng.normal(size=(1, SMALL.d)), [[SENTINEL, SENTINEL, 0]])
    np.testing.assert_array_equal(X[0, 0, :2], 0.0)
    np.testing.assert_array_equal(X[0, 0, 2], agent.padded[0])


@pytest.fixture(scope="module")
def fifty_users():
    ds = synthetic_dataset(n_users=50, n_items=40, per_user=25, seed=9)
    feats = extract_features(train_bprmf(ds.split, MFConfig(d=SMALL.d, epochs=5)))
    return ds, feats


def test_pretraining_targets_bounded(fifty_users):
    _, feats = fifty_users
    t = pretrain_targets(feats.item_features)
    assert np.all(np.abs(t) < 1.0)
    assert np.max(np.abs(t)) == pytest.approx(0.9)


def test_pretraining_loss_non_increasing_full_batch(fifty_users):
    ds, feats = fifty_users
    agent = DDPGAgent(feats.item_features, SMALL, DDPGConfig(actor_lr=1e-3), seed=0)
    hist = pretrain_actor(agent, ds.split, feats.user_features, epochs=30, full_batch=True)
    assert np.all(np.diff(hist) <= 1e-12)
    assert hist[-1] < hist[0]
    assert agent.target_actor.get_flat().tobytes() == agent.actor.get_flat().tobytes()


def test_pretraining_is_seeded(fifty_users):
    ds, feats = fifty_users
    flats = []
    for _ in range(2):
        agent = DDPGAgent(feats.item_features, SMALL, seed=3)
        pretrain_actor(agent, ds.split, feats.user_features, epochs=2, seed=4)
        flats.append(agent.actor.get_flat())
    np.testing.assert_array_equal(*flats)


def test_pretrain_pairs_follow_train_sequences(fifty_users):
    ds, _ = fifty_users
    u, r, n = pretrain_pairs(ds.split, 3, users=[0])
    seq = ds.split.train.items_by_user()[0]
    assert len(n) == len(seq) - 1
    np.testing.assert_array_equal(n, seq[1:])
    assert tuple(r[0]) == (SENTINEL, SENTINEL, seq[0])


def test_train_log_session_consumes_future():
    sess = TrainLogSession(0, np.array([1, 2, 3, 4, 5, 6]), 8, 3)
    assert sess.recent == (1, 2, 3)
    assert sorted(sess.candidate_ids().tolist()) == [0, 4, 5, 6, 7]
    rewards, prev, nxt = sess.step([5, 0])
    assert rewards == [1.0, 0.0] and prev == (1, 2, 3) and nxt == (2, 3, 5)
    assert sess.future == {4, 6}
    assert 5 not in sess.candidate_ids() and 0 not in sess.candidate_ids()


def test_rollout_modes(fifty_users):
    ds, feats = fifty_users
    agent = DDPGAgent(feats.item_features, SMALL, DDPGConfig(batch_size=8), seed=0)
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(1000, SMALL.d, SMALL.ell, rng)
    actor0 = agent.actor.get_flat()
    rows = []
    rollout_train_log(agent, ds.split, feats.user_features, buf, episodes=3, horizon=5, k=3,
                      beta=0.5, noise=GaussianNoise(rng=rng), rng=rng, learn="critic",
                      log=rows.append)
    np.testing.assert_array_equal(agent.actor.get_flat(), actor0)
    assert rows and all(np.isnan(r["actor_objective"]) for r in rows)
    rollout_train_log(agent, ds.split, feats.user_features, buf, episodes=3, horizon=5, k=3,
                      beta=0.5, noise=GaussianNoise(rng=rng), rng=rng, learn="both")
    assert not np.array_equal(agent.actor.get_flat(), actor0)
    assert np.all((buf.reward[:len(buf)] >= 0) & (buf.reward[:len(buf)] <= 3))


def test_agent_checkpoint_roundtrip(tmp_path, rng):
    agent = small_agent()
    agent.train_step(filled_buffer(agent))
    agent.save(tmp_path / "a.ckpt")
    back = DDPGAgent.load(tmp_path / "a.ckpt", agent.padded[:-1])
    assert back.net_cfg == agent.net_cfg and back.cfg == agent.cfg
    for name, net in agent.networks().items():
        assert back.networks()[name].get_flat().tobytes() == net.get_flat().tobytes()
    x = batch_inputs(agent, rng)
    assert back.actor(x).tobytes() == agent.actor(x).tobytes()
