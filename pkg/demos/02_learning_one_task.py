"""
Costate-focus learning on one task
==================================

A single n_s = 10 linear task. The learner babbles to fit its dynamics model
and cost surrogate, then alternates forward and backward sweeps. The mean
test cost is printed every 50 rollouts. The babble stage is shortened from
15 000 to 3000 minibatches to keep the run under a minute or two.
"""

import numpy as np

from costate_rl.costate import LearnerConfig, babble_stage, make_agent, run_learning
from costate_rl.envgen import TaskSpec, make_task, random_states
from costate_rl.harness import evaluate_policy, size_networks
from costate_rl.nn import MlpNet

rng = np.random.default_rng(1)
env = make_task(TaskSpec(n_s=10, n_c=1, n_C=4, seed=1))

# the network budgets used for this task size: 314 policy parameters, ~4483 estimator parameters
sizes = size_networks(314, 4483, env.n_s, env.n_a)
print("policy", sizes.policy.layer_sizes, " f_hat", sizes.f_hat.layer_sizes, " c'_hat", sizes.cprime_hat.layer_sizes)

policy = MlpNet.init(sizes.policy, rng)
test = random_states(rng, env.n_s, 100)
agent = make_agent(LearnerConfig(method="CF", n_babble=3000), policy, sizes.f_hat, sizes.cprime_hat, rng)

losses = babble_stage(agent, env, rng)
print(f"babble: f loss {losses[:100, 0].mean():.4f} -> {losses[-100:, 0].mean():.6f}, "
      f"c' loss {losses[:100, 1].mean():.3f} -> {losses[-100:, 1].mean():.4f}")

run = run_learning(agent, env, 600, rng, evaluate=lambda p: evaluate_policy(p, env, test), eval_every=50)
for r, c in zip(run.eval_rollouts, run.eval_costs):
    print(f"rollout {r:>4}: test cost {c:.3f}")
print(f"mean gate rate {np.mean([s.gate_rate for s in run.stats]):.2f}")
