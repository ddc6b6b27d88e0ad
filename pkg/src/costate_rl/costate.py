"""Costate learners: CPG, CF and VCF.

All three share one loop. A babble stage fits a dynamics model ``f_hat`` and a
cost surrogate ``cprime_hat`` on random state-action pairs. Each rollout then
runs a forward sweep under the policy, followed by a backward sweep that
carries ``lam_t = dC/ds_t`` from the final time down to 0::

    lam_T = dt * (dc/ds + dmu/ds^T dc/da)
    g_t   = dt * (dc/da + df/da^T lam_{t+1})                  # dC/da_t
    lam_t = lam_{t+1} + dt * (dc/ds + df/ds^T lam_{t+1}) + dmu/ds^T g_t

CPG sums ``g_t`` through the policy and takes one step after the rollout.
CF also focuses ``f_hat`` on the error projected onto the costate and trains a
shadow copy of the policy step by step, gated on model accuracy; the live
policy is nudged toward the shadow after each rollout. VCF is CF with the
exact cost-rate gradient supplied by the environment.

Gradients are summed over the minibatch, matching :mod:`costate_rl.nn`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .envgen import DivergenceError, Environment, random_actions, random_states
from .nn import AdamState, MlpNet, MlpSpec, adam_step, backward, forward, load_nets, pack_adam, save_nets, soft_update, unpack_adam

log = logging.getLogger(__name__)

METHODS = ("CPG", "CF", "VCF")


class TrialAborted(RuntimeError):
    """Learning hit a non-finite value and cannot continue."""


@dataclass
class LearnerConfig:
    method: str = "CF"
    lr_babble: float = 1e-3
    lr_focus: float = 1e-4
    lr_policy: float | None = None
    lr_cprime: float = 3e-4
    tau: float = 0.1
    gate: bool = True
    n_babble: int = 15000
    mental_practice: float = 0.0
    n_m: int = 100
    # CPG only
    cprime_refine: bool = True
    refresh_model: bool = False
    replay_capacity: int = 100_000
    refine_updates: int = 30
    # tanh(10) == 1 - 4e-9, so larger c' targets carry no cost information
    cprime_cap: float = 10.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.mental_practice <= 1.0:
            raise ValueError("mental_practice must lie in [0, 1]")
        if self.lr_policy is None:
            self.lr_policy = 3e-4 if self.method == "CPG" else 1e-3

    @property
    def indirect(self) -> bool:
        return self.method != "CPG"

    @property
    def focusing(self) -> bool:
        return self.method != "CPG"


def is_imaginary(index: int, fraction: float) -> bool:
    """Whether rollout ``index`` (0-based) is imaginary under an even schedule."""
    return int(np.floor((index + 1) * fraction)) > int(np.floor(index * fraction))


# models -------------------------------------------------------------------


class NetDynamics:
    """A learned ``f_hat(s, a)`` exposing the same calls as an Environment."""

    def __init__(self, net: MlpNet, n_s: int):
        self.net = net
        self.n_s = n_s

    def f(self, s, a):
        return self.net(np.vstack([s, a]))

    def vjp(self, s, a, w):
        _, cache = forward(self.net, np.vstack([s, a]))
        dx = backward(self.net, cache, w, need_params=False)[1]
        return dx[:self.n_s], dx[self.n_s:]


class ExactCost:
    """Cost-rate gradient straight from the environment (VCF)."""

    def __init__(self, env: Environment):
        self.env = env

    def value(self, s, a):
        return self.env.cost_rate(s)

    def grad(self, s, a):
        return self.env.cost_grad(s), np.zeros_like(a)


class SurrogateCost:
    """Cost-rate ``tanh(c')`` with ``c'`` and its gradient from a model.

    ``model.value_and_grad(s, a)`` must return ``(c', dc'/ds, dc'/da)``.
    """

    def __init__(self, model):
        self.model = model

    def value(self, s, a):
        return np.tanh(self.model.value_and_grad(s, a)[0])

    def grad(self, s, a):
        cp, dcp_ds, dcp_da = self.model.value_and_grad(s, a)
        c = np.tanh(cp)
        scale = 1.0 - c**2
        return scale * dcp_ds, scale * dcp_da


class NetCprime:
    def __init__(self, net: MlpNet, n_s: int):
        self.net = net
        self.n_s = n_s

    def value_and_grad(self, s, a):
        y, cache = forward(self.net, np.vstack([s, a]))
        dx = backward(self.net, cache, np.ones_like(y), need_params=False)[1]
        return y, dx[:self.n_s], dx[self.n_s:]


class ExactCprime:
    """The true ``c' = s^T B s``; plugs into SurrogateCost for limit checks."""

    def __init__(self, env: Environment):
        self.env = env

    def value_and_grad(self, s, a):
        return self.env.cprime(s), self.env.cprime_grad(s), np.zeros_like(a)


# agent --------------------------------------------------------------------


@dataclass
class Agent:
    config: LearnerConfig
    policy: MlpNet
    f_hat: MlpNet
    cprime_hat: MlpNet | None
    shadow: MlpNet = None
    policy_opt: AdamState = None
    f_opt: AdamState = None
    c_opt: AdamState = None
    replay: "CprimeReplay" = None

    def __post_init__(self):
        if self.shadow is None:
            self.shadow = self.policy.copy()
        if self.policy_opt is None:
            self.policy_opt = AdamState.for_net(self.policy)
        if self.f_opt is None:
            self.f_opt = AdamState.for_net(self.f_hat)
        if self.c_opt is None and self.cprime_hat is not None:
            self.c_opt = AdamState.for_net(self.cprime_hat)
        if self.replay is None and self.config.method == "CPG" and self.config.cprime_refine:
            self.replay = CprimeReplay(self.config.replay_capacity, self.n_s + self.n_a)

    @property
    def n_s(self) -> int:
        return self.f_hat.spec.n_out

    @property
    def n_a(self) -> int:
        return self.policy.spec.n_out

    def dynamics(self) -> NetDynamics:
        return NetDynamics(self.f_hat, self.n_s)

    def cost_model(self, env: Environment):
        if self.config.method == "VCF":
            return ExactCost(env)
        return SurrogateCost(NetCprime(self.cprime_hat, self.n_s))

    def nets(self) -> dict[str, MlpNet]:
        nets = {"policy": self.policy, "shadow": self.shadow, "f_hat": self.f_hat}
        if self.cprime_hat is not None:
            nets["cprime_hat"] = self.cprime_hat
        return nets

    def optimizers(self) -> dict[str, AdamState]:
        opts = {"policy": self.policy_opt, "f_hat": self.f_opt}
        if self.c_opt is not None:
            opts["cprime_hat"] = self.c_opt
        return opts


def save_agent(path, agent: Agent, extra: dict[str, np.ndarray] | None = None) -> None:
    """All networks and optimizer states; the c' replay buffer is not saved."""
    save_nets(path, agent.nets(), {**pack_adam(agent.optimizers()), **(extra or {})})


def load_agent(path, config: LearnerConfig) -> tuple[Agent, dict[str, np.ndarray]]:
    nets, extra = load_nets(path)
    opts = unpack_adam(extra)
    agent = Agent(
        config, nets["policy"], nets["f_hat"], nets.get("cprime_hat"), shadow=nets["shadow"],
        policy_opt=opts["policy"], f_opt=opts["f_hat"], c_opt=opts.get("cprime_hat"),
    )
    return agent, {k: v for k, v in extra.items() if not k.startswith("adam/")}


def make_agent(
    config: LearnerConfig,
    policy: MlpNet,
    f_spec: MlpSpec,
    cprime_spec: MlpSpec | None,
    rng: np.random.Generator,
) -> Agent:
    """Build an agent around a copy of ``policy``; estimators are freshly initialised.

    VCF reads the exact cost gradient and may pass ``cprime_spec=None``.
    """
    n_s, n_a = policy.spec.n_in, policy.spec.n_out
    if f_spec.n_in != n_s + n_a or f_spec.n_out != n_s:
        raise ValueError("f_hat must map n_s + n_a inputs to n_s outputs")
    if cprime_spec is None:
        if config.method != "VCF":
            raise ValueError(f"{config.method} needs a cprime_hat network")
    elif cprime_spec.n_in != n_s + n_a or cprime_spec.n_out != 1:
        raise ValueError("cprime_hat must map n_s + n_a inputs to one output")
    if policy.spec.output_activation != "tanh":
        raise ValueError("the policy needs a tanh output layer")
    f_hat = MlpNet.init(f_spec, rng)
    cprime_hat = MlpNet.init(cprime_spec, rng) if cprime_spec is not None else None
    return Agent(config, policy.copy(), f_hat, cprime_hat)


# babble -------------------------------------------------------------------


def babble_step(agent: Agent, env: Environment, s: np.ndarray, a: np.ndarray, lr: float) -> tuple[float, float]:
    """One supervised step on both estimators; returns the two half squared errors."""
    x = np.vstack([s, a])
    dt = env.dt
    y_f, cache_f = forward(agent.f_hat, x)
    e_f = dt * (y_f - env.f(s, a))
    grads_f, _ = backward(agent.f_hat, cache_f, dt * e_f)
    loss_f = 0.5 * float(np.sum(e_f**2))
    loss_c = 0.0
    if agent.cprime_hat is not None:
        y_c, cache_c = forward(agent.cprime_hat, x)
        e_c = y_c - env.cprime(s)
        grads_c, _ = backward(agent.cprime_hat, cache_c, e_c)
        loss_c = 0.5 * float(np.sum(e_c**2))
    if not (np.isfinite(loss_f) and np.isfinite(loss_c)):
        raise TrialAborted(f"babble loss became non-finite (f: {loss_f}, c': {loss_c})")
    adam_step(agent.f_hat, grads_f, agent.f_opt, lr)
    if agent.cprime_hat is not None:
        adam_step(agent.cprime_hat, grads_c, agent.c_opt, lr)
    return loss_f, loss_c


def babble_stage(agent: Agent, env: Environment, rng: np.random.Generator, n_minibatches: int | None = None) -> np.ndarray:
    """Fit ``f_hat`` and ``cprime_hat`` on uniform random probes.

    Returns an ``(n, 2)`` array of per-minibatch losses (f, c').
    """
    cfg = agent.config
    n = cfg.n_babble if n_minibatches is None else n_minibatches
    losses = np.empty((n, 2))
    for i in range(n):
        s = random_states(rng, agent.n_s, cfg.n_m)
        a = random_actions(rng, agent.n_a, cfg.n_m)
        losses[i] = babble_step(agent, env, s, a, cfg.lr_babble)
    return losses


# forward sweep ------------------------------------------------------------


@dataclass
class Trajectory:
    states: list[np.ndarray]
    actions: list[np.ndarray]
    is_imaginary: bool = False
    truncated: bool = False
    policy_caches: list = field(default_factory=list, repr=False)

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1


def rollout_forward(
    policy: MlpNet,
    transition,
    s0: np.ndarray,
    n_steps: int,
    imaginary: bool = False,
) -> Trajectory:
    """Run ``n_steps`` transitions from ``s0`` under ``policy``.

    ``transition(s, a)`` returns the next state. The action at the final
    state is evaluated too, for the terminal cost term, but never applied.
    """
    traj = Trajectory([s0], [], is_imaginary=imaginary)
    s = s0
    for t in range(n_steps + 1):
        a, cache = forward(policy, s)
        traj.actions.append(a)
        traj.policy_caches.append(cache)
        if t == n_steps:
            break
        try:
            s = transition(s, a)
        except DivergenceError:
            traj.truncated = True
            break
        if not np.isfinite(s).all():
            traj.truncated = True
            break
        traj.states.append(s)
    return traj


def real_transition(env: Environment, rng: np.random.Generator | None):
    return lambda s, a: env.step(s, a, rng)


def model_transition(dynamics, dt: float):
    return lambda s, a: s + dt * dynamics.f(s, a)


def rollout(agent: Agent, env: Environment, rng: np.random.Generator, imaginary: bool = False) -> Trajectory:
    s0 = random_states(rng, agent.n_s, agent.config.n_m)
    if imaginary:
        step = model_transition(agent.dynamics(), env.dt)
    else:
        step = real_transition(env, rng)
    return rollout_forward(agent.policy, step, s0, env.n_steps, imaginary)


# backward sweep -----------------------------------------------------------


@dataclass
class CostateSweep:
    costates: list[np.ndarray]
    action_grads: list[np.ndarray]
    focus_errors: list[np.ndarray | None]
    gates: list[bool]

    @property
    def gate_rate(self) -> float:
        return float(np.mean(self.gates)) if self.gates else float("nan")


def gate_flag(e: np.ndarray, lam_next: np.ndarray, ds: np.ndarray) -> bool:
    """True when mean(e^2) is below the minibatch variance of lam . ds."""
    proj = np.sum(lam_next * ds, axis=0)
    return bool(np.mean(np.square(e)) < np.var(proj))


def policy_state_vjp(policy: MlpNet, s: np.ndarray, g: np.ndarray, cache=None) -> np.ndarray:
    """``dmu/ds^T g`` per column."""
    if cache is None or cache.version != policy.version or cache.net_id != id(policy):
        _, cache = forward(policy, s)
    return backward(policy, cache, g, need_params=False)[1]


def terminal_costate(policy: MlpNet, cost, s_T, a_T, dt: float, cache=None) -> tuple[np.ndarray, np.ndarray]:
    dc_ds, dc_da = cost.grad(s_T, a_T)
    g_T = dt * dc_da
    lam_T = dt * dc_ds + policy_state_vjp(policy, s_T, g_T, cache)
    return lam_T, g_T


def focus_step(f_hat: MlpNet, opt: AdamState, s, a, ds, lam_next, dt: float, lr: float) -> np.ndarray:
    """One descent step on 0.5 * e^2, e = lam . (dt * f_hat(s, a) - ds); returns e."""
    y, cache = forward(f_hat, np.vstack([s, a]))
    e = np.sum(lam_next * (dt * y - ds), axis=0, keepdims=True)
    if lr > 0:
        grads, _ = backward(f_hat, cache, dt * e * lam_next)
        adam_step(f_hat, grads, opt, lr)
    return e


def costate_backsweep(
    traj: Trajectory,
    policy: MlpNet,
    dynamics,
    cost,
    dt: float,
    focus=None,
    on_action_grad=None,
) -> CostateSweep:
    """Sweep costates back through a trajectory.

    ``focus(s, a, ds, lam_next)`` is called first at each step when given and
    returns the focusing error; it may update the model that ``dynamics``
    wraps. ``on_action_grad(t, s_t, g_t, gate)`` receives every action
    gradient, including the terminal one.
    """
    n = traj.n_steps
    caches = traj.policy_caches if len(traj.policy_caches) == n + 1 else [None] * (n + 1)
    lam, g = terminal_costate(policy, cost, traj.states[n], traj.actions[n], dt, caches[n])
    costates = [None] * (n + 1)
    grads = [None] * (n + 1)
    errors: list = [None] * n
    gates = [True] * n
    costates[n], grads[n] = lam, g
    if on_action_grad is not None:
        on_action_grad(n, traj.states[n], g, True)
    for t in range(n - 1, -1, -1):
        s, a = traj.states[t], traj.actions[t]
        if focus is not None:
            ds = traj.states[t + 1] - s
            e = focus(s, a, ds, lam)
            errors[t] = e
            gates[t] = gate_flag(e, lam, ds)
        ws, wa = dynamics.vjp(s, a, lam)
        dc_ds, dc_da = cost.grad(s, a)
        g = dt * (dc_da + wa)
        if on_action_grad is not None:
            on_action_grad(t, s, g, gates[t])
        lam = lam + dt * (dc_ds + ws) + policy_state_vjp(policy, s, g, caches[t])
        if not np.isfinite(lam).all():
            raise TrialAborted(f"costate became non-finite at step {t}")
        costates[t], grads[t] = lam, g
    return CostateSweep(costates, grads, errors, gates)


# policy updates -----------------------------------------------------------


def shadow_update(agent: Agent, s: np.ndarray, g: np.ndarray) -> None:
    """Backprop one action gradient through the shadow policy and step it."""
    _, cache = forward(agent.shadow, s)
    grads, _ = backward(agent.shadow, cache, g)
    adam_step(agent.shadow, grads, agent.policy_opt, agent.config.lr_policy)


def nudge_policy(agent: Agent) -> None:
    """mu <- mu + tau (mu_shadow - mu), then re-clone the shadow from mu."""
    soft_update(agent.policy, agent.shadow, agent.config.tau)
    agent.shadow.load_from(agent.policy)


def policy_gradient(policy: MlpNet, traj: Trajectory, sweep: CostateSweep) -> list[np.ndarray]:
    """dC/dtheta = sum_t g_t dmu(s_t)/dtheta, summed over the minibatch."""
    total = None
    for t, g in enumerate(sweep.action_grads):
        cache = traj.policy_caches[t] if len(traj.policy_caches) > t else None
        if cache is None or cache.version != policy.version:
            _, cache = forward(policy, traj.states[t])
        grads, _ = backward(policy, cache, g)
        total = grads if total is None else [acc + gi for acc, gi in zip(total, grads)]
    return total


def update_policy_direct(agent: Agent, traj: Trajectory, sweep: CostateSweep) -> list[np.ndarray]:
    grads = policy_gradient(agent.policy, traj, sweep)
    adam_step(agent.policy, grads, agent.policy_opt, agent.config.lr_policy)
    agent.shadow.load_from(agent.policy)
    return grads


# c' refinement (CPG) ------------------------------------------------------


class CprimeReplay:
    """FIFO buffer of (state-action, c') samples."""

    def __init__(self, capacity: int, n_x: int):
        self.x = np.zeros((n_x, capacity))
        self.y = np.zeros((1, capacity))
        self.capacity = capacity
        self.size = 0
        self._next = 0

    def add(self, x: np.ndarray, y: np.ndarray) -> None:
        n = x.shape[1]
        idx = (self._next + np.arange(n)) % self.capacity
        self.x[:, idx] = x
        self.y[:, idx] = y
        self._next = int((self._next + n) % self.capacity)
        self.size = min(self.capacity, self.size + n)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, self.size, size=n)
        return self.x[:, idx], self.y[:, idx]

    def __len__(self) -> int:
        return self.size


def cpg_cprime_refinement(agent: Agent, rng: np.random.Generator, n_updates: int | None = None) -> list[float]:
    """Supervised c' steps on replayed samples; no-op on an empty buffer."""
    buf = agent.replay
    if buf is None or len(buf) == 0:
        return []
    n_updates = agent.config.refine_updates if n_updates is None else n_updates
    losses = []
    for _ in range(n_updates):
        x, y = buf.sample(rng, agent.config.n_m)
        pred, cache = forward(agent.cprime_hat, x)
        e = pred - y
        grads, _ = backward(agent.cprime_hat, cache, e)
        adam_step(agent.cprime_hat, grads, agent.c_opt, agent.config.lr_cprime)
        losses.append(0.5 * float(np.mean(e**2)))
    return losses


# main loop ----------------------------------------------------------------


@dataclass
class RolloutStats:
    imaginary: bool
    env_steps: int
    gate_rate: float
    mean_focus_sq: float
    mean_cost: float


@dataclass
class LearningRun:
    eval_rollouts: list[int] = field(default_factory=list)
    eval_costs: list[float] = field(default_factory=list)
    stats: list[RolloutStats] = field(default_factory=list)
    diverged: bool = False


def train_rollout(agent: Agent, env: Environment, rng: np.random.Generator, imaginary: bool = False) -> RolloutStats:
    """One forward sweep, backsweep and policy update."""
    cfg = agent.config
    dt = env.dt
    calls_before = env.step_calls
    traj = rollout(agent, env, rng, imaginary)
    if traj.truncated:
        raise TrialAborted("rollout state became non-finite")
    env_steps = env.step_calls - calls_before

    dynamics = agent.dynamics()
    # VCF knows the cost function itself, so it needs no surrogate even in imagination
    cost = agent.cost_model(env)

    focus = None
    if cfg.focusing and not imaginary:
        def focus(s, a, ds, lam_next):
            return focus_step(agent.f_hat, agent.f_opt, s, a, ds, lam_next, dt, cfg.lr_focus)

    hook = None
    if cfg.indirect:
        def hook(t, s, g, gate):
            if gate or not cfg.gate:
                shadow_update(agent, s, g)

    sweep = costate_backsweep(traj, agent.policy, dynamics, cost, dt, focus=focus, on_action_grad=hook)

    if cfg.indirect:
        nudge_policy(agent)
    else:
        update_policy_direct(agent, traj, sweep)
        if not imaginary:
            _cpg_after_rollout(agent, env, traj, rng)

    sq = [float(np.mean(e**2)) for e in sweep.focus_errors if e is not None]
    cost_rates = np.array([float(np.mean(env.cost_rate(s))) for s in traj.states]) if not imaginary else np.array([np.nan])
    return RolloutStats(
        imaginary=imaginary,
        env_steps=env_steps,
        gate_rate=sweep.gate_rate,
        mean_focus_sq=float(np.mean(sq)) if sq else float("nan"),
        mean_cost=float(dt * cost_rates.sum()),
    )


def _cpg_after_rollout(agent: Agent, env: Environment, traj: Trajectory, rng: np.random.Generator) -> None:
    cfg = agent.config
    if agent.replay is not None:
        for s, a in zip(traj.states, traj.actions):
            agent.replay.add(np.vstack([s, a]), np.minimum(env.cprime(s), cfg.cprime_cap))
        cpg_cprime_refinement(agent, rng)
    if cfg.refresh_model:
        for t in range(traj.n_steps):
            s, a = traj.states[t], traj.actions[t]
            x = np.vstack([s, a])
            y, cache = forward(agent.f_hat, x)
            e_f = env.dt * y - (traj.states[t + 1] - s)
            grads, _ = backward(agent.f_hat, cache, env.dt * e_f)
            adam_step(agent.f_hat, grads, agent.f_opt, cfg.lr_babble)


def run_learning(
    agent: Agent,
    env: Environment,
    n_rolls: int,
    rng: np.random.Generator,
    evaluate=None,
    eval_every: int = 10,
) -> LearningRun:
    """Alternate forward sweeps and backsweeps for ``n_rolls`` rollouts.

    ``evaluate(policy)`` is called before the first rollout and after every
    ``eval_every`` rollouts; its return values form the learning curve.
    """
    run = LearningRun()

    def record(i):
        if evaluate is not None:
            run.eval_rollouts.append(i)
            run.eval_costs.append(float(evaluate(agent.policy)))

    record(0)
    p = agent.config.mental_practice
    for i in range(n_rolls):
        try:
            stats = train_rollout(agent, env, rng, imaginary=is_imaginary(i, p))
        except TrialAborted as exc:
            log.warning("trial aborted at rollout %d: %s", i, exc)
            run.diverged = True
            break
        run.stats.append(stats)
        if (i + 1) % eval_every == 0:
            record(i + 1)
    return run
