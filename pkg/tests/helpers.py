"""Independent oracles shared by several test modules."""

import itertools

import numpy as np

from mesa_slam.factorgraph import (
    BearingRangeFactor,
    BetweenFactor,
    FactorGraph,
    Key,
    NoiseModel,
    PriorFactor,
    RangeFactor,
)
from mesa_slam.manifold import between, random_pose, retract, tangent_dim


def fd_jacobians(factor, values, h=1e-6):
    """Central differences of the unwhitened error through ``retract``."""
    out = []
    for pos, key in enumerate(factor.keys):
        v = values[key]
        p = tangent_dim(v)
        jac = np.zeros((factor.dim, p))
        for c in range(p):
            d = np.zeros(p)
            d[c] = h
            plus = dict(values)
            minus = dict(values)
            plus[key] = retract(v, d)
            minus[key] = retract(v, -d)
            ep = factor.error(*(plus[k] for k in factor.keys))
            em = factor.error(*(minus[k] for k in factor.keys))
            diff = ep - em
            if isinstance(factor, BearingRangeFactor):
                diff[0] = (diff[0] + np.pi) % (2 * np.pi) - np.pi
            jac[:, c] = diff / (2 * h)
        out.append(jac)
    return out


def random_noise(rng, d):
    a = rng.normal(size=(d, d))
    return NoiseModel.from_covariance(a @ a.T + d * np.eye(d))


def find_dataset(*names):
    """First existing benchmark file among ``$MESA_DATA_DIR`` and ``data/``."""
    import os
    from pathlib import Path

    roots = [os.environ.get("MESA_DATA_DIR"), Path(__file__).resolve().parents[1] / "data"]
    for root in filter(None, roots):
        for name in names:
            p = Path(root) / name
            if p.is_file():
                return p
    return None


def chain_graph(n, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    values = {Key(0, i): random_pose(rng, dim, max_angle=1.0) for i in range(n)}
    noise = NoiseModel.from_sigmas(np.full(3 if dim == 2 else 6, 0.1))
    graph = FactorGraph(
        BetweenFactor(Key(0, i), Key(0, i + 1), between(values[Key(0, i)], values[Key(0, i + 1)]), noise)
        for i in range(n - 1)
    )
    return graph, values


K = [Key(0, i) for i in range(10)]


def sample_factor(kind, rng):
    """A random factor of ``kind`` and values for its keys."""
    if kind == "prior-se2":
        return PriorFactor(K[0], random_pose(rng, 2), random_noise(rng, 3)), {K[0]: random_pose(rng, 2)}
    if kind == "prior-se3":
        return PriorFactor(K[0], random_pose(rng, 3), random_noise(rng, 6)), {K[0]: random_pose(rng, 3)}
    if kind == "prior-point":
        return PriorFactor(K[0], rng.normal(size=3), random_noise(rng, 3)), {K[0]: rng.normal(size=3)}
    if kind in ("between-se2", "between-se3"):
        dim = 2 if kind.endswith("2") else 3
        vals = {K[0]: random_pose(rng, dim), K[1]: random_pose(rng, dim)}
        return BetweenFactor(K[0], K[1], random_pose(rng, dim), random_noise(rng, 3 * dim - 3)), vals
    if kind == "between-point":
        vals = {K[0]: rng.normal(size=2), K[1]: rng.normal(size=2)}
        return BetweenFactor(K[0], K[1], rng.normal(size=2), random_noise(rng, 2)), vals
    if kind == "range-pose3-point":
        vals = {K[0]: random_pose(rng, 3), K[1]: rng.normal(size=3) * 4}
        return RangeFactor(K[0], K[1], rng.uniform(1, 5), NoiseModel.isotropic(1, 0.1)), vals
    if kind == "range-pose2-pose2":
        vals = {K[0]: random_pose(rng, 2), K[1]: random_pose(rng, 2)}
        return RangeFactor(K[0], K[1], rng.uniform(1, 5), NoiseModel.isotropic(1, 0.1)), vals
    if kind == "bearing-range":
        vals = {K[0]: random_pose(rng, 2), K[1]: random_pose(rng, 2)}
        f = BearingRangeFactor(K[0], K[1], rng.uniform(-3, 3), rng.uniform(1, 5), random_noise(rng, 2))
        return f, vals
    if kind.startswith("biased-"):
        from mesa_slam.mesa import BiasedPriorFactor, constraint_eval, edge_value

        ckind = kind[len("biased-"):]
        if ckind == "linear":
            theta, z = rng.normal(size=3), rng.normal(size=3)
        else:
            theta, z = random_pose(rng, 3), edge_value(ckind, random_pose(rng, 3))
        lam = rng.normal(size=constraint_eval(ckind, theta, z).size)
        return BiasedPriorFactor(ckind, K[0], z, lam, rng.uniform(0.5, 50)), {K[0]: theta}
    raise ValueError(kind)


FACTOR_KINDS = [
    "prior-se2", "prior-se3", "prior-point", "between-se2", "between-se3", "between-point",
    "range-pose3-point", "range-pose2-pose2", "bearing-range",
    "biased-geodesic", "biased-split", "biased-apx-geo", "biased-chordal", "biased-linear",
]


def brute_force(factors, robot_values):
    """Average each factor's cost over every assignment of copies, by explicit loops."""
    total = 0.0
    for f in factors:
        holders = [[r for r in sorted(robot_values) if k in robot_values[r]] for k in f.keys]
        costs = []
        for combo in itertools.product(*holders):
            vals = [robot_values[r][k] for r, k in zip(combo, f.keys)]
            costs.append(f.cost(*vals))
        total += sum(costs) / len(costs)
    return total


def random_toy(seed, n_keys=6, n_robots=3):
    rng = np.random.default_rng(seed)
    keys = [Key(0, i) for i in range(n_keys)]
    truth = {k: random_pose(rng, 3, max_angle=1.0) for k in keys}
    factors = [PriorFactor(keys[0], truth[keys[0]], random_noise(rng, 6))]
    for _ in range(2 * n_keys):
        a, b = rng.choice(n_keys, 2, replace=False)
        m = retract(between(truth[keys[a]], truth[keys[b]]), rng.normal(scale=0.1, size=6))
        factors.append(BetweenFactor(keys[a], keys[b], m, random_noise(rng, 6)))
    robot_values = {r: {} for r in range(n_robots)}
    for k in keys:
        holders = rng.choice(n_robots, rng.integers(1, n_robots + 1), replace=False)
        for r in holders:
            robot_values[int(r)][k] = retract(truth[k], rng.normal(scale=0.2, size=6))
    return factors, robot_values


# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_RESULTS: list = []


def report(criterion, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
