"""Partition a single-robot g2o pose graph and solve it collaboratively.

Usage: ``python demos/partitioned_benchmark.py [file.g2o] [parts]``.  Without
arguments a small synthetic graph is written to a temporary g2o file first.
"""

import sys
import tempfile
from pathlib import Path

from mesa_slam import SyntheticConfig, generate
from mesa_slam.baselines import centralized
from mesa_slam.datasets import balance, load_g2o, partition, write_g2o
from mesa_slam.mesa import StopCriteria, build_team, variant_config
from mesa_slam.netsim import communication_budget, execute, generate_schedule, team_edges


def synthetic_g2o(path):
    single = generate(SyntheticConfig(dims=3, robots=1, length=120, seed=4))
    # drop the gauge prior; partition() adds its own
    write_g2o(single.factors[0][1:], single.initial[0], path)


def main(argv):
    if argv:
        path = Path(argv[0])
    else:
        path = Path(tempfile.mkdtemp()) / "synthetic.g2o"
        synthetic_g2o(path)
    parts = int(argv[1]) if len(argv) > 1 else 5

    graph, values = load_g2o(path)
    problem = partition(graph, values, parts, name=path.stem)
    print(f"{path.name}: {len(values)} poses, {len(graph)} factors, {parts} parts, "
          f"balance {balance(problem):.2f}, robot edges {len(problem.edges)}")

    config = variant_config("geodesic", "benchmark")
    robots = build_team(problem.factors, problem.initial, config)
    edges = team_edges(robots)
    budget = communication_budget(len(edges), len(robots))
    trace = execute(robots, generate_schedule(edges, budget), config, StopCriteria(max_communications=budget))
    print(f"centralized residual {centralized(problem).residual:.4f}")
    print(f"geodesic MESA        {trace.final_r2:.4f} ({trace.status}, {trace.communications} communications)")


if __name__ == "__main__":
    main(sys.argv[1:])
