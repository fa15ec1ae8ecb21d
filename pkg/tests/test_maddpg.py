import numpy as np
import pytest

from dataclasses import replace

from tapf.env import Physics, build_world, observe_all, step
from tapf.maddpg import (Batch, ReplayBuffer, TrainConfig, actor_act, actor_objective_and_grad,
                         actor_update, critic_target, critic_update, evaluate, new_policy, symmetry_transform,
                         train)
from tapf.nn import (AdamState, MlpParams, TrainingDivergence, finite_diff_check, four_layer,
                     init_mlp, mlp_forward, soft_update)
from tapf.scenarios import get_preset, make_scenario

from oracles import dense_forward, random_generic_mlp


def zero_net(widths, output="identity", final_bias=0.0):
    ws = [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])]
    bs = [np.zeros(o) for o in widths[1:]]
    bs[-1][:] = final_bias
    return MlpParams(ws, bs, output)


def random_batch(rng, b, n, obs_dim, done=None):
    return Batch(rng.normal(size=(b, n * obs_dim)), rng.uniform(size=(b, 4 * n)),
                 rng.normal(size=b), rng.normal(size=(b, n * obs_dim)),
                 np.zeros(b) if done is None else np.asarray(done, dtype=float))


def transformed_world(w, code):
    def f(p):
        p = p[..., ::-1] if code & 1 else p
        return p * np.array([-1.0 if code & 2 else 1.0, -1.0 if code & 4 else 1.0])
    return replace(w, agent_pos=f(w.agent_pos), agent_vel=f(w.agent_vel), task_pos=f(w.task_pos),
                   obstacle_pos=f(w.obstacle_pos))


# --------------------------------------------------------------------------- acting

def test_actor_act_noiseless_is_deterministic_and_clamped():
    actor = four_layer(8, 4, "sigmoid", 0)
    o = np.linspace(-1, 1, 8)
    assert np.array_equal(actor_act(actor, o, 0.0), actor_act(actor, o, 0.0))
    noisy = actor_act(actor, np.tile(o, (500, 1)), 5.0, np.random.default_rng(0))
    assert noisy.min() >= 0.0 and noisy.max() <= 1.0


def test_zero_actor_outputs_half():
    u = actor_act(zero_net((8, 4, 4, 4, 4), "sigmoid"), np.ones(8), 0.0)
    assert np.array_equal(u, np.full(4, 0.5))


def test_actor_act_rejects_negative_sigma():
    with pytest.raises(ValueError):
        actor_act(four_layer(8, 4, "sigmoid", 0), np.zeros(8), -0.1)


def test_shared_policy_symmetry():
    actor = four_layer(6, 4, "sigmoid", 3)
    o = np.random.default_rng(1).normal(size=6)
    u = actor_act(actor, np.stack([o, o]), 0.0)
    assert np.array_equal(u[0], u[1])


# --------------------------------------------------------------------------- critic

def test_critic_target_examples():
    rng = np.random.default_rng(0)
    actor = four_layer(3, 4, "sigmoid", 1)
    q2 = zero_net((2 * 3 + 8, 4, 4, 1), final_bias=2.0)
    batch = random_batch(rng, 1, 2, 3)
    batch.r[:] = 1.0
    assert critic_target(q2, actor, batch, 0.95, 2)[0] == pytest.approx(2.9, abs=1e-12)
    assert critic_target(q2, actor, batch, 0.0, 2)[0] == 1.0
    batch.done[:] = 1.0
    assert critic_target(q2, actor, batch, 0.95, 2)[0] == 1.0


def test_terminal_target_ignores_target_critic():
    rng = np.random.default_rng(2)
    actor = four_layer(3, 4, "sigmoid", 1)
    batch = random_batch(rng, 16, 2, 3, done=np.ones(16))
    a = critic_target(four_layer(14, 1, "identity", 5), actor, batch, 0.95, 2)
    b = critic_target(four_layer(14, 1, "identity", 6), actor, batch, 0.95, 2)
    assert np.array_equal(a, b) and np.array_equal(a, batch.r)


def test_critic_update_perfect_fit_is_noop():
    rng = np.random.default_rng(0)
    critic = four_layer(14, 1, "identity", 0)
    batch = random_batch(rng, 8, 2, 3)
    y = mlp_forward(critic, np.concatenate([batch.x, batch.a], axis=1))[0][:, 0]
    new, _, loss = critic_update(critic, AdamState.for_params(critic), batch, y)
    assert loss == 0.0
    assert np.array_equal(new.to_vector(), critic.to_vector())


def test_critic_loss_matches_naive_residuals():
    rng = np.random.default_rng(1)
    critic = four_layer(14, 1, "identity", 0)
    batch = random_batch(rng, 8, 2, 3)
    y = rng.normal(size=8)
    _, _, loss = critic_update(critic, AdamState.for_params(critic), batch, y)
    q = dense_forward(critic.weights, critic.biases, "identity", np.concatenate([batch.x, batch.a], 1))
    naive = sum((q[i, 0] - y[i]) ** 2 for i in range(8)) / 8
    assert abs(loss - naive) < 1e-12


def test_critic_overfits_one_batch():
    rng = np.random.default_rng(4)
    critic = four_layer(14, 1, "identity", 0, hidden=32)
    state = AdamState.for_params(critic, lr=1e-3)
    batch = random_batch(rng, 16, 2, 3)
    y = rng.uniform(-1, 1, 16)
    losses = []
    for _ in range(500):
        critic, state, loss = critic_update(critic, state, batch, y)
        losses.append(loss)
    assert losses[-1] < 1e-3
    # smoothed decrease: every 50-step window improves on the previous one
    windows = np.array(losses).reshape(10, 50).mean(1)
    assert (np.diff(windows) < 0).all()


def test_critic_update_rejects_non_finite_targets():
    rng = np.random.default_rng(0)
    critic = four_layer(14, 1, "identity", 0)
    with pytest.raises(TrainingDivergence):
        critic_update(critic, AdamState.for_params(critic), random_batch(rng, 4, 2, 3), np.full(4, np.inf))


# --------------------------------------------------------------------------- actor

def test_flat_critic_leaves_actor_unchanged():
    rng = np.random.default_rng(0)
    actor = four_layer(3, 4, "sigmoid", 1)
    critic = zero_net((14, 4, 4, 1), final_bias=3.0)
    batch = random_batch(rng, 8, 2, 3)
    j, g = actor_objective_and_grad(actor, critic, batch, 2)
    assert j == 3.0 and not g.to_vector().any()
    new, _, _ = actor_update(actor, critic, AdamState.for_params(actor), batch, 2)
    assert np.array_equal(new.to_vector(), actor.to_vector())


def test_single_agent_ascent_raises_selected_action():
    rng = np.random.default_rng(0)
    obs_dim = 3
    actor = four_layer(obs_dim, 4, "sigmoid", 2, hidden=8)
    # Q(x, a) = a_0 through three identity-like layers (ReLU is exact on a in [0, 1])
    w1 = np.zeros((1, obs_dim + 4))
    w1[0, obs_dim] = 1.0
    critic = MlpParams([w1, np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1))],
                       [np.zeros(1)] * 4, "identity")
    batch = random_batch(rng, 16, 1, obs_dim)
    before = mlp_forward(actor, batch.x)[0][:, 0].mean()
    new, _, _ = actor_update(actor, critic, AdamState.for_params(actor), batch, 1)
    after = mlp_forward(new, batch.x)[0][:, 0].mean()
    assert after > before


def test_actor_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    n, obs_dim = 2, 3
    worst = 0.0
    for _ in range(10):
        actor, _ = random_generic_mlp(rng, (obs_dim, 6, 5, 6, 4), "sigmoid")
        batch = random_batch(rng, 4, n, obs_dim)
        pi = mlp_forward(actor, batch.x.reshape(-1, obs_dim))[0].reshape(4, n * 4)
        # the critic is evaluated with each slot swapped for pi; require smoothness at all of them
        inputs = []
        for k in range(n):
            joint = batch.a.copy()
            joint[:, 4 * k:4 * k + 4] = pi[:, 4 * k:4 * k + 4]
            inputs.append(np.concatenate([batch.x, joint], 1))
        while True:
            critic, _ = random_generic_mlp(rng, (n * (obs_dim + 4), 6, 6, 5, 1), "identity")
            caches = [mlp_forward(critic, x)[1] for x in inputs]
            if all(np.abs(z).min() >= 1e-4 for c in caches for z in c.pre[:-1]):
                break

        def objective(v):
            a = actor.from_vector(v)
            pi = dense_forward(a.weights, a.biases, "sigmoid", batch.x.reshape(-1, obs_dim), np.longdouble)
            pi = pi.reshape(4, n, 4)
            total = 0
            for k in range(n):
                joint = np.asarray(batch.a, dtype=np.longdouble).copy()
                joint[:, 4 * k:4 * k + 4] = pi[:, k]
                total += dense_forward(critic.weights, critic.biases, "identity",
                                       np.concatenate([batch.x.astype(np.longdouble), joint], 1),
                                       np.longdouble).sum()
            return total / (4 * n)

        j, g = actor_objective_and_grad(actor, critic, batch, n)
        assert j == pytest.approx(float(objective(actor.to_vector())), abs=1e-12)
        worst = max(worst, finite_diff_check(objective, actor.to_vector(), g.to_vector()))
    assert worst < 1e-4


def test_regularized_actor_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    obs_dim, reg = 3, 0.05
    actor, _ = random_generic_mlp(rng, (obs_dim, 6, 5, 4), "sigmoid")
    # N=1 with a linear critic keeps the check about the penalty path
    critic = MlpParams([rng.normal(size=(1, obs_dim + 4))], [np.zeros(1)], "identity")
    batch = random_batch(rng, 4, 1, obs_dim)

    def objective(v):
        a = actor.from_vector(v)
        pi = dense_forward(a.weights, a.biases, "sigmoid", batch.x, np.longdouble)
        z = dense_forward(a.weights, a.biases, "identity", batch.x, np.longdouble)
        q = dense_forward(critic.weights, critic.biases, "identity",
                          np.concatenate([batch.x.astype(np.longdouble), pi], 1), np.longdouble)
        return q.mean() - reg * (z * z).mean()

    j, g = actor_objective_and_grad(actor, critic, batch, 1, action_reg=reg)
    assert j == pytest.approx(float(objective(actor.to_vector())), abs=1e-12)
    assert finite_diff_check(objective, actor.to_vector(), g.to_vector()) < 1e-4


def test_action_reg_pulls_saturated_outputs_back():
    actor = zero_net((2, 3, 4), "sigmoid")
    actor.biases[-1][:] = 12.0   # sigmoid(12) is flat: the critic alone gives almost no signal
    critic = zero_net((6, 1))
    batch = random_batch(np.random.default_rng(0), 8, 1, 2)
    _, g = actor_objective_and_grad(actor, critic, batch, 1, action_reg=1e-3)
    assert (g.biases[-1] < 0).all()


def test_updates_touch_only_their_own_network():
    rng = np.random.default_rng(0)
    actor = four_layer(3, 4, "sigmoid", 1, hidden=8)
    critic = four_layer(14, 1, "identity", 2, hidden=8)
    a0, c0 = actor.to_vector().copy(), critic.to_vector().copy()
    batch = random_batch(rng, 8, 2, 3)
    new_actor, _, _ = actor_update(actor, critic, AdamState.for_params(actor), batch, 2)
    assert critic.to_vector().tobytes() == c0.tobytes()
    critic_update(critic, AdamState.for_params(critic), batch, np.zeros(8))
    assert actor.to_vector().tobytes() == a0.tobytes()
    assert not np.array_equal(new_actor.to_vector(), a0)


def test_soft_update_contracts_toward_online():
    t, o = init_mlp((3, 4, 1), rng=0), init_mlp((3, 4, 1), rng=1)
    new = soft_update(t, o, 0.01)
    np.testing.assert_allclose(np.abs(new.to_vector() - o.to_vector()),
                               0.99 * np.abs(t.to_vector() - o.to_vector()), rtol=1e-12, atol=1e-15)


# --------------------------------------------------------------------------- replay

def test_replay_buffer_is_fifo_and_bounded():
    buf = ReplayBuffer(5, 1, 1)
    for k in range(8):
        buf.add([k], [0], float(k), [k + 1], False)
    assert len(buf) == 5
    assert sorted(buf.r.tolist()) == [3.0, 4.0, 5.0, 6.0, 7.0]
    batch = buf.sample(5, np.random.default_rng(0))
    assert sorted(batch.r.tolist()) == [3.0, 4.0, 5.0, 6.0, 7.0]
    with pytest.raises(ValueError):
        buf.sample(6, np.random.default_rng(0))


# --------------------------------------------------------------------------- training loop

def small_config(**kw):
    base = dict(total_steps=300, warmup_steps=100, batch_size=32, update_every=10,
                eval_every=150, eval_episodes=2, hidden=16, seed=3)
    return TrainConfig(**(base | kw))


def factory(seed):
    return make_scenario(get_preset("a2_t2"), seed)


def test_warmup_gate_blocks_updates():
    policy, metrics = train(factory, small_config(total_steps=250, warmup_steps=1000))
    ref = new_policy(2, factory(0).obs_dim, small_config(), np.random.default_rng(3))
    assert all(r["critic_loss"] is None and r["actor_objective"] is None for r in metrics)
    assert metrics[-1]["env_step"] == 250 and metrics[-1]["eval_return"] is not None
    assert policy.actor.to_vector().shape == ref.actor.to_vector().shape


def test_training_is_deterministic():
    a_pol, a = train(factory, small_config())
    b_pol, b = train(factory, small_config())
    assert a == b
    assert a_pol.actor.to_vector().tobytes() == b_pol.actor.to_vector().tobytes()
    assert any(r["critic_loss"] is not None for r in a)
    assert [r for r in a if r["eval_return"] is not None][0]["env_step"] >= 150


def test_training_writes_checkpoint(tmp_path):
    train(factory, small_config(total_steps=120), checkpoint_dir=tmp_path)
    assert {p.name for p in tmp_path.iterdir()} >= {"actor.bin", "critic.bin", "target_critic.bin"}


def test_sigma_schedule():
    c = TrainConfig(total_steps=1000)
    assert c.sigma(0) == 0.3 and c.sigma(500) == 0.05 and c.sigma(999) == 0.05
    assert c.sigma(250) == pytest.approx(0.175)


def test_paper_scale_defaults():
    c = TrainConfig()
    assert (c.gamma, c.lr, c.batch_size, c.total_steps) == (0.95, 4e-4, 1024, 1_000_000)
    assert (c.alpha, c.update_every, c.warmup_steps, c.buffer_capacity) == (0.01, 100, 10_000, 1_000_000)


# --------------------------------------------------------------------------- evaluation

def test_untrained_policy_evaluates():
    actor = four_layer(factory(0).obs_dim, 4, "sigmoid", 0)
    rep = evaluate(actor, factory, 3, seed=1)
    assert 0.0 <= rep.completion_rate <= 1.0
    assert len(rep.trajectories) == 3 and rep.trajectories[0].shape[1:] == (2, 2)
    again = evaluate(actor, factory, 3, seed=1)
    assert rep.returns == again.returns and rep.path_lengths == again.path_lengths


def go_straight(world, obs):
    """Full push toward the first active task, easing off inside 0.2 m so the agent does not overshoot."""
    acts = []
    for o in obs:
        rel = o[4:6]
        d = np.hypot(*rel)
        ux, uy = (rel / d) if d > 0 else (0.0, 0.0)
        g = min(1.0, d / 0.2)
        acts.append([max(-ux, 0) * g, max(ux, 0) * g, max(-uy, 0) * g, max(uy, 0) * g])  # left right down up
    return np.array(acts)


def test_scripted_policy_path_length_close_to_straight_line():
    start, goal = np.array([-0.6, -0.4]), np.array([0.5, 0.3])
    rep = evaluate(go_straight, lambda _: build_world([start], [goal], [], Physics(), 100), 1)
    straight = np.linalg.norm(goal - start) - 0.05
    assert rep.completion_rate == 1.0
    assert straight - 1e-9 <= rep.path_lengths[0][0] <= 1.1 * straight


def test_observations_feed_the_actor():
    w = factory(0)
    actor = four_layer(w.obs_dim, 4, "sigmoid", 0)
    assert actor_act(actor, observe_all(w), 0.0).shape == (2, 4)


# --------------------------------------------------------------------------- augmentation

@pytest.mark.parametrize("code", range(8))
def test_symmetry_transform_matches_stepping_the_mirrored_world(code):
    rng = np.random.default_rng(code)
    w = make_scenario(get_preset("a2_t2"), 3)
    w = replace(w, agent_vel=rng.uniform(-0.3, 0.3, size=(2, 2)))
    u = rng.uniform(size=(2, 4))
    w1, r, done, _ = step(w, u)
    batch = Batch(observe_all(w).reshape(1, -1), u.reshape(1, -1), np.array([r.total]),
                  observe_all(w1).reshape(1, -1), np.array([float(done)]))
    got = symmetry_transform(batch, np.array([code]))
    m = transformed_world(w, code)
    m1, rm, _, _ = step(m, got.a.reshape(2, 4))
    np.testing.assert_allclose(got.x[0], observe_all(m).ravel(), atol=1e-12)
    np.testing.assert_allclose(got.x_next[0], observe_all(m1).ravel(), atol=1e-12)
    assert rm.total == pytest.approx(r.total, abs=1e-12)


def test_symmetry_identity_code_is_a_no_op():
    b = random_batch(np.random.default_rng(0), 5, 2, 22)
    out = symmetry_transform(b, np.zeros(5, dtype=int))
    assert np.array_equal(out.x, b.x) and np.array_equal(out.a, b.a)
