"""How message drops and link outages change a MESA run.

Each run uses the same problem and the same budget; only the network differs.
"""

from mesa_slam import SyntheticConfig, generate
from mesa_slam.mesa import StopCriteria, build_team, variant_config
from mesa_slam.netsim import (
    communication_budget,
    events_for_budget,
    execute,
    generate_schedule,
    team_edges,
)


def run(problem, drop_prob, outages=None):
    config = variant_config("geodesic")
    robots = build_team(problem.factors, problem.initial, config)
    edges = team_edges(robots)
    budget = communication_budget(len(edges), len(robots))
    schedule = generate_schedule(edges, events_for_budget(budget, drop_prob), "random", drop_prob, outages, seed=1)
    trace = execute(robots, schedule, config, StopCriteria(max_communications=budget))
    return trace


def main():
    problem = generate(SyntheticConfig(dims=3, robots=3, length=40, seed=2))
    print(f"{problem.name}, robot graph edges {problem.edges}")
    first = problem.edges[0]
    cases = [
        ("reliable", 0.0, None),
        ("25% drops", 0.25, None),
        ("50% drops", 0.5, None),
        (f"edge {first} down for 200 events", 0.0, {first: [(0, 200)]}),
    ]
    for label, p, outages in cases:
        trace = run(problem, p, outages)
        print(f"{label:32s} attempts {trace.attempts:5d}  delivered {trace.communications:5d}  "
              f"r2_mean {trace.final_r2:.4f}  ({trace.status})")


if __name__ == "__main__":
    main()
