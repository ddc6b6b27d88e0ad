"""Costate-based model-learning reinforcement learning.

Modules: :mod:`~costate_rl.nn` (dense networks and Adam),
:mod:`~costate_rl.envgen` (random second-order tasks),
:mod:`~costate_rl.costate` (CPG, CF, VCF learners),
:mod:`~costate_rl.ddpg` (baseline) and :mod:`~costate_rl.harness`
(blocks of trials, learning curves, summaries).
"""

from .costate import LearnerConfig, babble_stage, costate_backsweep, make_agent, run_learning
from .ddpg import DdpgConfig, make_ddpg_agent, run_ddpg
from .envgen import Environment, TaskSpec, make_task
from .harness import MethodConfig, RunConfig, evaluate_policy, run_block, size_networks
from .nn import MlpNet, MlpSpec, param_count

__version__ = "0.1.0"

__all__ = [
    "DdpgConfig",
    "Environment",
    "LearnerConfig",
    "MethodConfig",
    "MlpNet",
    "MlpSpec",
    "RunConfig",
    "TaskSpec",
    "babble_stage",
    "costate_backsweep",
    "evaluate_policy",
    "make_agent",
    "make_ddpg_agent",
    "make_task",
    "param_count",
    "run_block",
    "run_ddpg",
    "run_learning",
    "size_networks",
]
