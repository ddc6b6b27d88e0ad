"""
Mental practice
===============

Every other rollout runs inside the learned model instead of the
environment. The environment's step counter shows that the imaginary
rollouts cost no real experience.
"""

import numpy as np

from costate_rl.costate import LearnerConfig, babble_stage, make_agent, run_learning
from costate_rl.envgen import TaskSpec, make_task, random_states
from costate_rl.harness import evaluate_policy, size_networks
from costate_rl.nn import MlpNet

env = make_task(TaskSpec(seed=4))
sizes = size_networks(314, 4483, env.n_s, env.n_a)
init = MlpNet.init(sizes.policy, np.random.default_rng(0))
test = random_states(np.random.default_rng(1), env.n_s, 100)

for p in (0.0, 0.5):
    rng = np.random.default_rng(2)
    agent = make_agent(LearnerConfig(method="CF", n_babble=3000, mental_practice=p), init, sizes.f_hat, sizes.cprime_hat, rng)
    babble_stage(agent, env, rng)
    env.step_calls = 0
    run = run_learning(agent, env, 600, rng, evaluate=lambda pol: evaluate_policy(pol, env, test), eval_every=100)
    n_imag = sum(s.imaginary for s in run.stats)
    print(f"p = {p}: {n_imag} imaginary rollouts, {env.step_calls} env steps, "
          f"costs {np.round(run.eval_costs, 3).tolist()}")
