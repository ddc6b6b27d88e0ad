"""
Checking the costate backsweep against brute force
==================================================

The backsweep produces dC/da_t for every time step from a single backward
pass. Here we build a tiny task, run one movement under a random policy, and
compare those gradients to central finite differences of the episode cost.
"""

import numpy as np

from costate_rl.costate import ExactCost, costate_backsweep, real_transition, rollout_forward
from costate_rl.envgen import TaskSpec, make_task
from costate_rl.nn import MlpNet, MlpSpec

rng = np.random.default_rng(0)

# a 4-state task (2 positions, 2 velocities), 4 time steps
env = make_task(TaskSpec(n_s=4, n_c=1, n_C=2, seed=3))
env.horizon = 0.4
policy = MlpNet.init(MlpSpec([4, 8, 8, env.n_a], output_activation="tanh"), rng)
s0 = rng.uniform(-0.3, 0.3, (4, 1))

# forward sweep on the true dynamics, then the backward sweep with exact cost gradients
traj = rollout_forward(policy, real_transition(env, None), s0, env.n_steps)
sweep = costate_backsweep(traj, policy, env, ExactCost(env), env.dt)


def episode_cost(offsets):
    """C = dt * sum_t c(s_t) with offsets added to the actions; later actions still follow the policy."""
    s, total = s0.copy(), 0.0
    for t in range(env.n_steps + 1):
        a = policy(s) + offsets[t]
        total += env.dt * env.cost_rate(s)[0, 0]
        if t < env.n_steps:
            s = s + env.dt * env.f(s, a)
    return total


h = 1e-5
print(f"{'t':>2} {'backsweep':>14} {'finite diff':>14}")
for t in range(env.n_steps):
    off = [np.zeros((env.n_a, 1)) for _ in range(env.n_steps + 1)]
    off[t][0] = h
    hi = episode_cost(off)
    off[t][0] = -h
    lo = episode_cost(off)
    print(f"{t:>2} {sweep.action_grads[t][0, 0]:>14.8f} {(hi - lo) / (2 * h):>14.8f}")

# the last action never reaches the cost through the configuration, so its gradient is exactly 0
