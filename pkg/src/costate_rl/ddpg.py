"""Deep deterministic policy gradient, oriented for cost minimisation.

The critic regresses ``Q(s, a) <- dt * c + Q'(s', mu'(s'))`` with no bootstrap
on the last transition of a movement, so ``Q(s_0, a_0)`` estimates the
undiscounted movement cost. The actor descends ``dQ/da`` through the policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envgen import DivergenceError, Environment, random_states
from .nn import AdamState, MlpNet, MlpSpec, adam_step, backward, forward, load_nets, pack_adam, save_nets, soft_update, unpack_adam


@dataclass
class DdpgConfig:
    lr_q: float = 3e-4
    lr_policy: float = 1e-4
    tau: float = 3e-4
    batch_size: int = 64
    buffer_capacity: int = 1_000_000
    n_m: int = 100
    noise: str = "gaussian"
    noise_start: float = 0.2
    noise_end: float = 0.05
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    final_layer_scale: float = 3e-3

    def __post_init__(self):
        if self.noise not in ("gaussian", "ou"):
            raise ValueError(f"unknown exploration noise {self.noise!r}")


class ReplayBuffer:
    """Fixed-capacity FIFO of (s, a, cost, s', terminal) columns."""

    def __init__(self, capacity: int, n_s: int, n_a: int):
        self.capacity = capacity
        self.s = np.zeros((n_s, capacity))
        self.a = np.zeros((n_a, capacity))
        self.c = np.zeros((1, capacity))
        self.s2 = np.zeros((n_s, capacity))
        self.terminal = np.zeros((1, capacity), dtype=bool)
        self.size = 0
        self._next = 0

    def add(self, s, a, c, s2, terminal) -> None:
        n = s.shape[1]
        if n > self.capacity:
            s, a, c, s2 = s[:, -self.capacity:], a[:, -self.capacity:], c[:, -self.capacity:], s2[:, -self.capacity:]
            n = self.capacity
        idx = (self._next + np.arange(n)) % self.capacity
        self.s[:, idx] = s
        self.a[:, idx] = a
        self.c[:, idx] = c
        self.s2[:, idx] = s2
        self.terminal[:, idx] = terminal
        self._next = int((self._next + n) % self.capacity)
        self.size = min(self.capacity, self.size + n)

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, self.size, size=n)
        return self.s[:, idx], self.a[:, idx], self.c[:, idx], self.s2[:, idx], self.terminal[:, idx]

    def __len__(self) -> int:
        return self.size


@dataclass
class DdpgAgent:
    config: DdpgConfig
    policy: MlpNet
    critic: MlpNet
    policy_target: MlpNet = None
    critic_target: MlpNet = None
    policy_opt: AdamState = None
    critic_opt: AdamState = None
    buffer: ReplayBuffer = None
    ou_state: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.policy_target is None:
            self.policy_target = self.policy.copy()
        if self.critic_target is None:
            self.critic_target = self.critic.copy()
        if self.policy_opt is None:
            self.policy_opt = AdamState.for_net(self.policy)
        if self.critic_opt is None:
            self.critic_opt = AdamState.for_net(self.critic)
        if self.buffer is None:
            self.buffer = ReplayBuffer(self.config.buffer_capacity, self.n_s, self.n_a)

    @property
    def n_s(self) -> int:
        return self.policy.spec.n_in

    @property
    def n_a(self) -> int:
        return self.policy.spec.n_out

    def nets(self) -> dict[str, MlpNet]:
        return {
            "policy": self.policy,
            "critic": self.critic,
            "policy_target": self.policy_target,
            "critic_target": self.critic_target,
        }

    def optimizers(self) -> dict[str, AdamState]:
        return {"policy": self.policy_opt, "critic": self.critic_opt}


def save_agent(path, agent: DdpgAgent, extra: dict[str, np.ndarray] | None = None) -> None:
    """Networks, targets and optimizer states; the replay buffer is not saved."""
    save_nets(path, agent.nets(), {**pack_adam(agent.optimizers()), **(extra or {})})


def load_agent(path, config: DdpgConfig) -> tuple[DdpgAgent, dict[str, np.ndarray]]:
    nets, extra = load_nets(path)
    opts = unpack_adam(extra)
    agent = DdpgAgent(
        config, nets["policy"], nets["critic"], nets["policy_target"], nets["critic_target"],
        policy_opt=opts["policy"], critic_opt=opts["critic"],
    )
    return agent, {k: v for k, v in extra.items() if not k.startswith("adam/")}


def make_ddpg_agent(config: DdpgConfig, policy: MlpNet, critic_spec: MlpSpec, rng: np.random.Generator) -> DdpgAgent:
    n_s, n_a = policy.spec.n_in, policy.spec.n_out
    if critic_spec.n_in != n_s + n_a or critic_spec.n_out != 1:
        raise ValueError("critic must map n_s + n_a inputs to one output")
    critic = MlpNet.init(critic_spec, rng)
    scale = config.final_layer_scale
    critic.weights[-1][...] = rng.uniform(-scale, scale, critic.weights[-1].shape)
    return DdpgAgent(config, policy.copy(), critic)


def exploration_sigma(config: DdpgConfig, progress: float) -> float:
    """Linearly decaying Gaussian noise level; ``progress`` runs from 0 to 1."""
    progress = min(max(progress, 0.0), 1.0)
    return config.noise_start + (config.noise_end - config.noise_start) * progress


def exploration_noise(agent: DdpgAgent, shape, rng: np.random.Generator, progress: float, reset: bool = False) -> np.ndarray:
    cfg = agent.config
    if cfg.noise == "gaussian":
        return exploration_sigma(cfg, progress) * rng.standard_normal(shape)
    if reset or agent.ou_state is None or agent.ou_state.shape != tuple(shape):
        agent.ou_state = np.zeros(shape)
    # Euler-Maruyama with unit step, as in the original DDPG setup
    agent.ou_state = agent.ou_state - cfg.ou_theta * agent.ou_state + cfg.ou_sigma * rng.standard_normal(shape)
    return agent.ou_state


def ddpg_act(agent: DdpgAgent, s: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    a = agent.policy(s)
    if noise is not None:
        a = a + noise
    return np.clip(a, -1.0, 1.0)


def critic_loss_and_grads(critic: MlpNet, x: np.ndarray, y: np.ndarray):
    """0.5 * sum((Q(x) - y)^2) and its parameter gradient."""
    q, cache = forward(critic, x)
    err = q - y
    grads, _ = backward(critic, cache, err)
    return 0.5 * float(np.sum(err**2)), grads


def critic_targets(agent: DdpgAgent, c, s2, terminal) -> np.ndarray:
    a2 = agent.policy_target(s2)
    q2 = agent.critic_target(np.vstack([s2, a2]))
    return c + np.where(terminal, 0.0, q2)


def actor_grads(agent: DdpgAgent, s: np.ndarray):
    """Gradient of sum_j Q(s_j, mu(s_j)) with respect to the policy parameters."""
    a, pcache = forward(agent.policy, s)
    _, qcache = forward(agent.critic, np.vstack([s, a]))
    dx = backward(agent.critic, qcache, np.ones((1, s.shape[1])), need_params=False)[1]
    grads, _ = backward(agent.policy, pcache, dx[agent.n_s:])
    return grads


def ddpg_update(agent: DdpgAgent, minibatch) -> float | None:
    """One critic step, one actor step and the target nudges. Returns the critic loss."""
    s, a, c, s2, terminal = minibatch
    cfg = agent.config
    y = critic_targets(agent, c, s2, terminal)
    loss, grads = critic_loss_and_grads(agent.critic, np.vstack([s, a]), y)
    adam_step(agent.critic, grads, agent.critic_opt, cfg.lr_q)
    adam_step(agent.policy, actor_grads(agent, s), agent.policy_opt, cfg.lr_policy)
    soft_update(agent.critic_target, agent.critic, cfg.tau)
    soft_update(agent.policy_target, agent.policy, cfg.tau)
    return loss


def train_episode(agent: DdpgAgent, env: Environment, rng: np.random.Generator, progress: float) -> float:
    """One minibatch of movements with an update per time step; returns mean movement cost."""
    cfg = agent.config
    dt = env.dt
    n = env.n_steps
    s = random_states(rng, agent.n_s, cfg.n_m)
    total = env.cost_rate(s)
    for t in range(n):
        noise = exploration_noise(agent, (agent.n_a, cfg.n_m), rng, progress, reset=(t == 0))
        a = ddpg_act(agent, s, noise)
        s2 = env.step(s, a, rng)
        c2 = env.cost_rate(s2)
        c = dt * env.cost_rate(s)
        last = t == n - 1
        if last:
            # terminal cost-rate closes the sum; nothing to bootstrap
            c = c + dt * c2
        agent.buffer.add(s, a, c, s2, last)
        total = total + c2
        if len(agent.buffer) >= cfg.batch_size:
            ddpg_update(agent, agent.buffer.sample(rng, cfg.batch_size))
        s = s2
    return float(np.mean(dt * total))


def run_ddpg(agent: DdpgAgent, env: Environment, n_rolls: int, rng: np.random.Generator, evaluate=None, eval_every: int = 10):
    """Train for ``n_rolls`` rollouts; returns (eval_rollouts, eval_costs, diverged)."""
    rollouts, costs = [], []
    if evaluate is not None:
        rollouts.append(0)
        costs.append(float(evaluate(agent.policy)))
    diverged = False
    for i in range(n_rolls):
        try:
            train_episode(agent, env, rng, i / max(n_rolls - 1, 1))
        except DivergenceError:
            diverged = True
            break
        if not np.isfinite(agent.policy.theta).all():
            diverged = True
            break
        if evaluate is not None and (i + 1) % eval_every == 0:
            rollouts.append(i + 1)
            costs.append(float(evaluate(agent.policy)))
    return rollouts, costs, diverged
