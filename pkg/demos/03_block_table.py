"""
A small block and its summary table
===================================

The harness runs every method on the same tasks, initial policies and test
movements, then reports block means of the smoothed C_min and C_final. This
block is deliberately small (2 trials, 800 rollouts, short babble stages);
the full-size setting is ``RunConfig()`` with its defaults.
"""

import tempfile

from costate_rl.harness import MethodConfig, RunConfig, rebuild_summary, run_block

config = RunConfig(
    methods=[
        MethodConfig("DDPG", "DDPG"),
        MethodConfig("CPG", "CPG", {"n_babble": 3000}),
        MethodConfig("CF", "CF", {"n_babble": 3000}),
        MethodConfig("VCF", "VCF", {"n_babble": 3000}),
    ],
    n_rolls=800,
    n_trials=2,
    master_seed=7,
)

out = tempfile.mkdtemp(prefix="costate_block_")
report = run_block(config, out)
print(report.table_text())

# costate curves start late by the babble-equivalent rollouts
for name, m in report.trials[0].methods.items():
    print(f"{name:<5} first evaluation at rollout {m.curve.rollouts[0]:>3}, initial cost {m.curve.costs[0]:.3f}")

# the exported curve files alone are enough to rebuild the table
print(f"\nfiles in {out}")
for row in rebuild_summary(out):
    print(row)
