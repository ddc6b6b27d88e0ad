import numpy as np
import pytest

from costate_rl.ddpg import (
    DdpgConfig,
    ReplayBuffer,
    actor_grads,
    critic_loss_and_grads,
    critic_targets,
    ddpg_act,
    ddpg_update,
    exploration_noise,
    exploration_sigma,
    load_agent,
    make_ddpg_agent,
    run_ddpg,
    save_agent,
    train_episode,
)
from costate_rl.envgen import TaskSpec, make_task, random_states
from costate_rl.nn import MlpNet, MlpSpec, flatten_grads


def make(seed=0, **kw):
    rng = np.random.default_rng(seed)
    policy = MlpNet.init(MlpSpec([10, 12, 12, 2], output_activation="tanh"), rng)
    agent = make_ddpg_agent(DdpgConfig(**kw), policy, MlpSpec([12, 24, 24, 1]), rng)
    return agent, rng


def test_final_critic_layer_small():
    agent, _ = make()
    assert np.abs(agent.critic.weights[-1]).max() <= 3e-3
    assert np.array_equal(agent.critic_target.theta, agent.critic.theta)


def test_bad_critic_shape():
    rng = np.random.default_rng(0)
    policy = MlpNet.init(MlpSpec([10, 4, 2], output_activation="tanh"), rng)
    with pytest.raises(ValueError):
        make_ddpg_agent(DdpgConfig(), policy, MlpSpec([10, 4, 1]), rng)


def test_actions_clamped():
    agent, rng = make()
    s = random_states(rng, 10, 50)
    a = ddpg_act(agent, s, 5.0 * rng.standard_normal((2, 50)))
    assert a.min() >= -1 and a.max() <= 1
    assert np.abs(a).max() == 1.0


def test_noise_schedule_and_reproducibility():
    cfg = DdpgConfig()
    assert exploration_sigma(cfg, 0.0) == 0.2
    assert exploration_sigma(cfg, 1.0) == pytest.approx(0.05)
    assert exploration_sigma(cfg, 0.5) == pytest.approx(0.125)
    agent, _ = make()
    a = exploration_noise(agent, (2, 4), np.random.default_rng(5), 0.3)
    b = exploration_noise(agent, (2, 4), np.random.default_rng(5), 0.3)
    assert np.array_equal(a, b)


def test_ou_noise_is_correlated():
    agent, _ = make(noise="ou")
    rng = np.random.default_rng(0)
    xs = [exploration_noise(agent, (1, 2000), rng, 0.0, reset=(t == 0)).copy() for t in range(30)]
    corr = np.corrcoef(xs[-1].ravel(), xs[-2].ravel())[0, 1]
    assert corr > 0.7
    with pytest.raises(ValueError):
        DdpgConfig(noise="pink")


def test_critic_gradient_matches_finite_differences():
    agent, rng = make()
    x = rng.uniform(-1, 1, (12, 5))
    y = rng.normal(size=(1, 5))
    loss, grads = critic_loss_and_grads(agent.critic, x, y)
    flat = flatten_grads(grads)
    theta = agent.critic.theta.copy()
    for i in rng.choice(theta.size, 15, replace=False):
        vals = []
        for d in (1e-6, -1e-6):
            agent.critic.theta[i] = theta[i] + d
            agent.critic.version += 1
            vals.append(critic_loss_and_grads(agent.critic, x, y)[0])
        agent.critic.theta[i] = theta[i]
        agent.critic.version += 1
        assert flat[i] == pytest.approx((vals[0] - vals[1]) / 2e-6, rel=1e-5, abs=1e-10)


def test_targets_stop_at_terminal():
    agent, rng = make()
    s2 = rng.uniform(-1, 1, (10, 4))
    c = np.arange(4.0)[None]
    term = np.array([[True, False, True, False]])
    y = critic_targets(agent, c, s2, term)
    q2 = agent.critic_target(np.vstack([s2, agent.policy_target(s2)]))
    np.testing.assert_array_equal(y, np.where(term, c, c + q2))


def test_constant_cost_fixed_point():
    """With cost dt per step over a 3-step chain, Q converges to the cost-to-go."""
    agent, rng = make(lr_q=3e-3, lr_policy=0.0, tau=0.05)
    s = rng.uniform(-1, 1, (10, 64))
    for _ in range(1500):
        batch = []
        for k in range(3):
            term = np.full((1, 64), k == 2)
            batch.append((s + k, agent.policy(s + k), np.full((1, 64), 0.1), s + k + 1, term))
        mb = tuple(np.hstack([b[i] for b in batch]) for i in range(5))
        ddpg_update(agent, mb)
    q0 = agent.critic(np.vstack([s, agent.policy(s)]))
    np.testing.assert_allclose(q0, 0.3, atol=0.03)


def test_actor_step_lowers_q():
    agent, rng = make()
    agent.critic.set_flat(rng.normal(size=agent.critic.theta.size) * 0.3)
    s = rng.uniform(-1, 1, (10, 64))
    q = lambda: float(np.sum(agent.critic(np.vstack([s, agent.policy(s)]))))
    g = flatten_grads(actor_grads(agent, s))
    before = q()
    agent.policy.set_flat(agent.policy.theta - 1e-4 * g / np.linalg.norm(g))
    assert q() < before


def test_target_lag_shrinks_with_frozen_source():
    from costate_rl.nn import soft_update

    agent, rng = make()
    agent.critic.set_flat(agent.critic.theta + rng.normal(size=agent.critic.theta.size))
    gaps = []
    for _ in range(5):
        gaps.append(np.linalg.norm(agent.critic_target.theta - agent.critic.theta))
        soft_update(agent.critic_target, agent.critic, 0.1)
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    frozen = agent.critic_target.theta.copy()
    soft_update(agent.critic_target, agent.critic, 0.0)
    assert np.array_equal(agent.critic_target.theta, frozen)


def test_terminal_everywhere_regresses_to_immediate_cost():
    agent, rng = make(lr_q=3e-3, lr_policy=0.0)
    s = rng.uniform(-1, 1, (10, 64))
    a = agent.policy(s)
    mb = (s, a, np.full((1, 64), 0.1 * 0.7), s, np.ones((1, 64), dtype=bool))
    for _ in range(800):
        ddpg_update(agent, mb)
    np.testing.assert_allclose(agent.critic(np.vstack([s, a])), 0.07, atol=2e-3)


def test_replay_buffer_fifo():
    buf = ReplayBuffer(5, 1, 1)
    for i in range(4):
        buf.add(np.full((1, 2), i), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), False)
    assert len(buf) == 5
    assert sorted(buf.s[0].tolist()) == [1, 2, 2, 3, 3]


def test_episode_fills_buffer_and_flags_terminal():
    agent, rng = make()
    env = make_task(TaskSpec())
    train_episode(agent, env, rng, 0.0)
    assert len(agent.buffer) == env.n_steps * agent.config.n_m
    assert agent.buffer.terminal[0, :agent.buffer.size].sum() == agent.config.n_m


def test_run_is_reproducible():
    def once():
        agent, rng = make(seed=4)
        env = make_task(TaskSpec(seed=1))
        rolls, costs, div = run_ddpg(agent, env, 3, rng, evaluate=lambda p: float(np.sum(p.theta)), eval_every=1)
        return rolls, costs, div, agent.policy.theta.copy()

    a, b = once(), once()
    assert a[:3] == b[:3] and np.array_equal(a[3], b[3])
    assert a[0] == [0, 1, 2, 3]


def test_agent_checkpoint_round_trip(tmp_path):
    agent, rng = make()
    env = make_task(TaskSpec())
    train_episode(agent, env, rng, 0.0)
    save_agent(tmp_path / "d.npz", agent)
    back, _ = load_agent(tmp_path / "d.npz", agent.config)
    for name, net in agent.nets().items():
        assert np.array_equal(back.nets()[name].theta, net.theta)
    assert back.critic_opt.step == agent.critic_opt.step > 0
    assert np.array_equal(back.critic_opt.v, agent.critic_opt.v)
