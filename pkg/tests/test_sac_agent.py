# tests/test_sac_agent.py
import numpy as np
import pytest

from app.services.config import SacConfig
from app.services.errors import BufferUnderfilledError, ContractViolation, ShapeError
from app.services.nn_core import AdamState, copy_params, init_mlp, mlp_forward
from app.services.sac_agent import (
    PerBuffer,
    SacAgent,
    SumTree,
    Transition,
    actor_loss_and_grad,
    critic_loss_and_grad,
    q_target,
    sample_action,
    squashed_log_prob,
    soft_target,
    soft_update,
    update_critics,
)

OBS_DIM, ACTION_DIM = 3, 2


def transition(value=0.0, priority=None):
    return Transition(
        obs=np.full(OBS_DIM, value),
        action=np.zeros(ACTION_DIM),
        reward=value,
        next_obs=np.full(OBS_DIM, value),
        done=False,
        priority=priority,
    )


def smooth_net(sizes, seed):
    return init_mlp(sizes, ("tanh", "tanh", "identity"), np.random.default_rng(seed))


def test_sum_tree_prefix_search():
    tree = SumTree(4)
    for i, value in enumerate([1.0, 2.0, 3.0, 4.0]):
        tree.update(i, value)
    assert tree.total == 10.0
    assert [tree.find(v) for v in (0.5, 1.5, 3.2, 9.9)] == [0, 1, 2, 3]
    tree.update(3, 0.0)
    assert tree.total == 6.0
    assert tree.find(5.9) == 2


def test_priorities_set_sampling_probabilities():
    buffer = PerBuffer(8, OBS_DIM, ACTION_DIM, alpha=1.0, rng=np.random.default_rng(0))
    buffer.add(transition(0.0, priority=3.0))
    buffer.add(transition(1.0, priority=1.0))
    np.testing.assert_allclose(buffer.probabilities(), [0.75, 0.25])

    counts = np.zeros(2)
    for _ in range(2000):
        _, _, indices = buffer.sample(2)
        np.add.at(counts, indices, 1)
    assert counts[0] / counts.sum() == pytest.approx(0.75, abs=0.03)


def test_equal_priorities_give_unit_weights():
    buffer = PerBuffer(16, OBS_DIM, ACTION_DIM, rng=np.random.default_rng(1))
    for i in range(10):
        buffer.add(transition(float(i)))
    _, weights, indices = buffer.sample(5, beta=0.4)
    np.testing.assert_allclose(weights, 1.0)
    assert np.all(indices < 10)


def test_sampling_needs_a_full_batch():
    buffer = PerBuffer(16, OBS_DIM, ACTION_DIM)
    buffer.add(transition())
    with pytest.raises(BufferUnderfilledError):
        buffer.sample(2)
    with pytest.raises(ContractViolation):
        buffer.add(transition(priority=0.0))


def test_ring_buffer_overwrites_oldest():
    buffer = PerBuffer(3, OBS_DIM, ACTION_DIM)
    for i in range(5):
        buffer.add(transition(float(i)))
    assert len(buffer) == 3
    assert sorted(buffer.rewards) == [2.0, 3.0, 4.0]


def test_beta_annealing():
    buffer = PerBuffer(4, OBS_DIM, ACTION_DIM, beta0=0.4)
    assert buffer.beta_at(0.0) == pytest.approx(0.4)
    assert buffer.beta_at(0.5) == pytest.approx(0.7)
    assert buffer.beta_at(2.0) == pytest.approx(1.0)


def test_soft_target_values():
    assert soft_target([1.0], [2.0], [0.0], 0.99)[0] == pytest.approx(2.98)
    assert soft_target([1.0], [2.0], [0.0], 0.0)[0] == pytest.approx(1.0)
    assert soft_target([1.0], [2.0], [1.0], 0.99)[0] == pytest.approx(1.0)


def test_soft_update_interpolates():
    online = smooth_net((3, 4, 4, 1), 0)
    original = smooth_net((3, 4, 4, 1), 1)

    target = copy_params(original)
    soft_update([target], [online], 0.0)
    for t, o in zip(target.arrays(), original.arrays()):
        np.testing.assert_allclose(t, o)

    soft_update([target], [online], 1.0)
    for t, o in zip(target.arrays(), online.arrays()):
        np.testing.assert_allclose(t, o)

    target = copy_params(original)
    soft_update([target], [online], 0.01)
    for t, o, n in zip(target.arrays(), original.arrays(), online.arrays()):
        np.testing.assert_allclose(t, 0.99 * o + 0.01 * n)

    with pytest.raises(ShapeError):
        soft_update([smooth_net((3, 5, 5, 1), 2)], [online], 0.5)


def test_deterministic_action_of_zero_head_is_zero():
    policy = init_mlp((OBS_DIM, 8, 8, 2 * ACTION_DIM), ("relu", "relu", "identity"), np.random.default_rng(0))
    policy.weights[-1][:] = 0.0
    action, log_prob = sample_action(policy, np.ones(OBS_DIM), stochastic=False)
    np.testing.assert_array_equal(action, 0.0)
    assert np.isfinite(log_prob)

    sampled, _ = sample_action(policy, np.ones((64, OBS_DIM)), rng=np.random.default_rng(1))
    assert sampled.shape == (64, ACTION_DIM)
    assert np.all(np.abs(sampled) < 1.0)


def test_critic_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    critic = smooth_net((OBS_DIM + ACTION_DIM, 6, 6, 1), 3)
    obs = rng.normal(size=(5, OBS_DIM))
    actions = rng.uniform(-1, 1, (5, ACTION_DIM))
    targets = rng.normal(size=5)
    weights = rng.uniform(0.2, 1.0, 5)

    _, grads, td = critic_loss_and_grad(critic, obs, actions, targets, weights)
    q = mlp_forward(critic, np.concatenate([obs, actions], axis=1))[0][:, 0]
    np.testing.assert_allclose(td, q - targets)

    h = 1e-6
    for analytic, param in zip(grads.arrays(), critic.arrays()):
        idx = tuple(rng.integers(0, s) for s in param.shape)
        saved = param[idx]
        param[idx] = saved + h
        plus = critic_loss_and_grad(critic, obs, actions, targets, weights)[0]
        param[idx] = saved - h
        minus = critic_loss_and_grad(critic, obs, actions, targets, weights)[0]
        param[idx] = saved
        assert analytic[idx] == pytest.approx((plus - minus) / (2 * h), rel=1e-4, abs=1e-7)


def test_actor_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    policy = smooth_net((OBS_DIM, 6, 6, 2 * ACTION_DIM), 5)
    critics = [smooth_net((OBS_DIM + ACTION_DIM, 6, 6, 1), seed) for seed in (6, 7)]
    obs = rng.normal(size=(4, OBS_DIM))
    eps = rng.standard_normal((4, ACTION_DIM))

    _, grads, _ = actor_loss_and_grad(policy, critics, obs, eps, 0.2)
    h = 1e-6
    for analytic, param in zip(grads.arrays(), policy.arrays()):
        for _ in range(3):
            idx = tuple(rng.integers(0, s) for s in param.shape)
            saved = param[idx]
            param[idx] = saved + h
            plus = actor_loss_and_grad(policy, critics, obs, eps, 0.2)[0]
            param[idx] = saved - h
            minus = actor_loss_and_grad(policy, critics, obs, eps, 0.2)[0]
            param[idx] = saved
            assert analytic[idx] == pytest.approx((plus - minus) / (2 * h), rel=1e-3, abs=1e-6)


def constant_head(mean, std):
    """Observation-independent 1-D policy: tanh of N(mean, std)"""
    policy = init_mlp((1, 2), ("identity",), np.random.default_rng(0))
    policy.weights[0][:] = 0.0
    policy.biases[0][:] = [mean, np.log(std)]
    return policy


def constant_critic(value, seed):
    critic = smooth_net((OBS_DIM + ACTION_DIM, 4, 4, 1), seed)
    critic.weights[-1][:] = 0.0
    critic.biases[-1][:] = value
    return critic


def test_squashed_density_matches_samples():
    mean, std = 0.3, 0.6
    actions, log_prob = sample_action(constant_head(mean, std), np.ones((200_000, 1)), rng=np.random.default_rng(3))

    def density(a):
        u = np.arctanh(a)
        return np.exp(squashed_log_prob(u[:, None], ((u - mean) / std)[:, None], np.full((len(u), 1), np.log(std))))

    edges = np.linspace(-0.95, 0.95, 20)
    counts, _ = np.histogram(actions[:, 0], bins=edges)
    for lo, hi, count in zip(edges[:-1], edges[1:], counts):
        grid = np.linspace(lo, hi, 201)
        values = density(grid)
        mass = float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(grid)))
        assert count / len(actions) == pytest.approx(mass, abs=4e-3)

    # Entropy of tanh(u): H(u) + E[log(1 - tanh(u)^2)]
    u = np.linspace(mean - 10 * std, mean + 10 * std, 40_001)
    gaussian = np.exp(-0.5 * ((u - mean) / std) ** 2) / (std * np.sqrt(2 * np.pi))
    integrand = gaussian * (-np.log(gaussian + 1e-300) + np.log(1.0 - np.tanh(u) ** 2 + 1e-6))
    entropy = float(np.sum(integrand) * (u[1] - u[0]))
    assert -log_prob.mean() == pytest.approx(entropy, abs=1.5e-2)


def test_min_target_is_symmetric_in_the_twins():
    rng = np.random.default_rng(8)
    policy = smooth_net((OBS_DIM, 6, 6, 2 * ACTION_DIM), 9)
    next_obs = rng.normal(size=(6, OBS_DIM))
    rewards, dones = rng.normal(size=6), np.array([0, 0, 1, 0, 1, 0])
    low, high = constant_critic(-1.5, 1), constant_critic(2.0, 2)

    y = q_target(rewards, next_obs, dones, [low, high], policy, 0.2, 0.9, np.random.default_rng(5))
    swapped = q_target(rewards, next_obs, dones, [high, low], policy, 0.2, 0.9, np.random.default_rng(5))
    np.testing.assert_allclose(y, swapped)

    _, log_prob = sample_action(policy, next_obs, rng=np.random.default_rng(5))
    np.testing.assert_allclose(y, rewards + 0.9 * (1 - dones) * (-1.5 - 0.2 * log_prob))


def test_twin_critics_are_independent():
    agent = SacAgent(OBS_DIM, ACTION_DIM, SacConfig(hidden_size=8, batch_size=4), seed=0)
    first, second = agent.critics
    assert not np.allclose(first.weights[0], second.weights[0])
    for a, b in zip(first.arrays(), second.arrays()):
        assert not np.shares_memory(a, b)
    for critic, target in zip(agent.critics, agent.targets):
        for a, b in zip(critic.arrays(), target.arrays()):
            assert not np.shares_memory(a, b)

    for i in range(6):
        agent.remember(np.full(OBS_DIM, i), agent.random_action(), -float(i), np.full(OBS_DIM, i + 1), False)
    batch, weights, _ = agent.buffer.sample(4)

    # The first critic's step depends on the second only through the shared target
    results = []
    for partner_seed in (20, 21):
        critics = [copy_params(first), smooth_net((OBS_DIM + ACTION_DIM, 8, 8, 1), partner_seed)]
        optimizers = [AdamState.for_params(c, 1e-3) for c in critics]
        update_critics(batch, weights, critics, optimizers, [constant_critic(0.5, 3)] * 2, agent.policy,
                       0.2, 0.99, np.random.default_rng(0))
        results.append(critics[0])
    for a, b in zip(results[0].arrays(), results[1].arrays()):
        np.testing.assert_allclose(a, b)


def test_actor_finds_the_best_action_of_a_one_step_task():
    config = SacConfig(
        hidden_size=32, batch_size=64, buffer_size=5000, actor_lr=3e-3, critic_lr=3e-3,
        weight_decay=0.0, alpha=0.01, warmup_steps=0,
    )
    agent = SacAgent(1, 1, config, seed=0)
    obs = np.ones(1)

    def reward(action):
        return -4.0 * float((action[0] - 0.5) ** 2)

    for _ in range(256):
        action = agent.random_action()
        agent.remember(obs, action, reward(action), obs, True)
    for _ in range(1500):
        action = agent.act(obs)
        agent.remember(obs, action, reward(action), obs, True)
        agent.update(progress=0.5)

    assert agent.act(obs, stochastic=False)[0] == pytest.approx(0.5, abs=0.1)


def test_priorities_are_mean_absolute_td():
    agent = SacAgent(OBS_DIM, ACTION_DIM, SacConfig(hidden_size=8, batch_size=4), seed=0)
    for i in range(6):
        agent.remember(np.full(OBS_DIM, i), np.zeros(ACTION_DIM), float(i), np.full(OBS_DIM, i), False)
    batch, weights, _ = agent.buffer.sample(4)
    _, priorities, tds = update_critics(
        batch, weights, agent.critics, agent.critic_opts, agent.targets, agent.policy,
        agent.alpha, 0.99, np.random.default_rng(0),
    )
    np.testing.assert_allclose(priorities, np.abs(tds).mean(axis=0) + 1e-6)
    assert np.all(priorities > 0)


def test_update_waits_for_a_batch():
    agent = SacAgent(OBS_DIM, ACTION_DIM, SacConfig(hidden_size=8, batch_size=4), seed=0)
    agent.remember(np.zeros(OBS_DIM), np.zeros(ACTION_DIM), 0.0, np.zeros(OBS_DIM), False)
    assert agent.update() is None
    for i in range(4):
        agent.remember(np.full(OBS_DIM, i), agent.random_action(), -1.0, np.full(OBS_DIM, i + 1), False)
    stats = agent.update(progress=0.5)
    assert set(stats) == {"q_loss", "pi_loss", "alpha"}
    assert np.isfinite(stats["q_loss"]) and stats["alpha"] == 0.2
    assert agent.updates == 1


def test_temperature_tuning_moves_alpha():
    agent = SacAgent(OBS_DIM, ACTION_DIM, SacConfig(hidden_size=8, batch_size=2, auto_alpha=True, alpha_lr=0.01), seed=1)
    for i in range(4):
        agent.remember(np.full(OBS_DIM, i), agent.random_action(), -1.0, np.full(OBS_DIM, i + 1), False)
    before = agent.alpha
    agent.update()
    assert agent.alpha != before


def test_agent_checkpoint_restores_policy_and_buffer(tmp_path):
    agent = SacAgent(OBS_DIM, ACTION_DIM, SacConfig(hidden_size=8, batch_size=2), seed=3)
    for i in range(5):
        agent.remember(np.full(OBS_DIM, i), agent.random_action(), -float(i), np.full(OBS_DIM, i + 1), False)
    agent.update()
    path = agent.save(tmp_path / "agent.npz", include_buffer=True, extra_arrays={"progress.episode": np.array(7)})

    restored, arrays = SacAgent.load(path)
    obs = np.linspace(-1, 1, OBS_DIM)
    np.testing.assert_array_equal(restored.act(obs, stochastic=False), agent.act(obs, stochastic=False))
    assert len(restored.buffer) == 5
    assert restored.updates == 1
    assert int(arrays["progress.episode"]) == 7
