"""Distributed consensus-ADMM back-end for collaborative SLAM."""

from .datasets import MultiRobotProblem, SyntheticConfig, generate, load_g2o, load_problem, partition, save_problem
from .factorgraph import (
    BearingRangeFactor,
    BetweenFactor,
    FactorGraph,
    Key,
    NoiseModel,
    PriorFactor,
    RangeFactor,
    SolverConfig,
    optimize,
    residual_norm2,
)
from .manifold import Pose
from .mesa import ConstraintKind, MesaConfig, StopCriteria, build_team, mesa_edge_step, variant_config
from .metrics import convergence_point, mean_residual
from .netsim import communication_budget, execute, generate_schedule

__version__ = "0.1.0"

__all__ = [
    "BearingRangeFactor",
    "BetweenFactor",
    "ConstraintKind",
    "FactorGraph",
    "Key",
    "MesaConfig",
    "MultiRobotProblem",
    "NoiseModel",
    "Pose",
    "PriorFactor",
    "RangeFactor",
    "SolverConfig",
    "StopCriteria",
    "SyntheticConfig",
    "build_team",
    "communication_budget",
    "convergence_point",
    "execute",
    "generate",
    "generate_schedule",
    "load_g2o",
    "load_problem",
    "mean_residual",
    "mesa_edge_step",
    "optimize",
    "partition",
    "residual_norm2",
    "save_problem",
    "variant_config",
]
