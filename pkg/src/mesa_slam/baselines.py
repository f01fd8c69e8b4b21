"""Reference solutions: every measurement in one solver, or none shared at all."""

from __future__ import annotations

from typing import NamedTuple

from .datasets import MultiRobotProblem
from .factorgraph import SolverConfig, Values, optimize
from .metrics import mean_residual


class CentralizedResult(NamedTuple):
    values: Values
    residual: float
    iterations: int


class IndependentResult(NamedTuple):
    values: dict  # robot -> Values over the robot's own variables
    r2_mean: float


def merged_initial(problem: MultiRobotProblem) -> Values:
    """One copy per variable, taken from the lowest-id robot holding it."""
    out: Values = {}
    for r in problem.robots:
        for k, v in problem.initial[r].items():
            out.setdefault(k, v)
    return out


def centralized(problem: MultiRobotProblem, config: SolverConfig | None = None) -> CentralizedResult:
    res = optimize(problem.all_factors(), merged_initial(problem), config)
    return CentralizedResult(res.values, res.residual, res.iterations)


def independent(problem: MultiRobotProblem, config: SolverConfig | None = None) -> IndependentResult:
    """Each robot solves its intra-robot factors alone, anchored by its own prior.

    Only the home robot estimates a variable, so the mean residual is evaluated
    with home copies, over all factors including the ignored inter-robot ones.
    """
    values = {}
    for r in problem.robots:
        graph = [f for f in problem.factors.get(r, []) if not problem.is_inter_robot(f)]
        anchor = problem.anchors.get(r)
        if anchor is not None and all(anchor is not f for f in graph):
            graph.append(anchor)
        own = {k: v for k, v in problem.initial[r].items() if problem.home[k] == r}
        values[r] = optimize(graph, own, config).values if graph else own
    owners = {k: (r,) for k, r in problem.home.items()}
    return IndependentResult(values, mean_residual(problem.all_factors(), values, owners))
