"""Consistency-aware evaluation of multi-robot solutions.

The mean residual averages each factor's cost over every combination of the
robots' local copies of the variables it touches, so it coincides with the
ordinary least-squares cost when all copies agree and grows with any
disagreement.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .factorgraph import Factor, FactorBatch
from .manifold import stack_values

MAX_COMBINATIONS = 10_000

SUMMARY_COLUMNS = (
    "dataset",
    "method",
    "beta0",
    "alpha",
    "communications_at_convergence",
    "r2_mean_final",
)
SUMMARY_SCHEMA = "# schema: mesa-summary/1"


class MissingCopy(KeyError):
    pass


class TooManyCombinations(ValueError):
    pass


class EmptyTrace(ValueError):
    pass


def owners_of(robot_values: dict) -> dict:
    """Key -> sorted tuple of robots holding a copy."""
    owners = defaultdict(list)
    for r in sorted(robot_values):
        for k in robot_values[r]:
            owners[k].append(r)
    return {k: tuple(v) for k, v in owners.items()}


def combination_set(factor: Factor, owners: dict) -> list[tuple]:
    """Cartesian product of the owner sets of the factor's variables."""
    sets = []
    for k in factor.keys:
        o = owners.get(k)
        if not o:
            raise MissingCopy(k)
        sets.append(o)
    size = math.prod(len(s) for s in sets)
    if size > MAX_COMBINATIONS:
        raise TooManyCombinations(f"{factor!r} has {size} copy combinations")
    return list(itertools.product(*sets))


class MeanResidualEvaluator:
    """Precomputed combination structure for repeated mean-residual evaluation."""

    def __init__(self, factors: Sequence[Factor], owners: dict):
        self.n_factors = len(factors)
        groups = defaultdict(lambda: ([], [], []))
        for fi, f in enumerate(factors):
            combos = combination_set(f, owners)
            g = groups[f.signature()]
            for c in combos:
                g[0].append(f)
                g[1].append(c)
                g[2].append(fi)
        self.counts = np.bincount(
            [fi for g in groups.values() for fi in g[2]], minlength=self.n_factors
        )
        self.groups = []
        for fs, combos, fidx in groups.values():
            u = np.array([f.noise.sqrt_information for f in fs])
            # (robot, key) lookups per key position
            lookups = [[(c[p], f.keys[p]) for f, c in zip(fs, combos)] for p in range(len(fs[0].keys))]
            self.groups.append((FactorBatch(fs), lookups, np.array(fidx), u))

    @classmethod
    def for_robots(cls, robots: dict) -> "MeanResidualEvaluator":
        """From ``mesa.RobotNode`` objects: all local factors, owners from local values."""
        factors = [f for r in sorted(robots) for f in robots[r].factors]
        return cls(factors, owners_of({r: robots[r].values for r in robots}))

    def factor_means(self, robot_values: dict) -> np.ndarray:
        sums = np.zeros(self.n_factors)
        for fs, lookups, fidx, u in self.groups:
            try:
                cols = [stack_values([robot_values[r][k] for r, k in lk]) for lk in lookups]
            except KeyError as exc:
                raise MissingCopy(exc.args[0]) from None
            e = type(fs[0]).batch_error(fs, cols)
            w = np.einsum("nij,nj->ni", u, e)
            np.add.at(sums, fidx, np.einsum("ni,ni->n", w, w))
        with np.errstate(invalid="ignore"):
            return sums / self.counts

    def __call__(self, robot_values: dict) -> float:
        return math.fsum(self.factor_means(robot_values))


def mean_residual(factors: Sequence[Factor], robot_values: dict, owners: dict | None = None) -> float:
    """Mean residual of per-robot solutions ``robot_values`` (robot -> Values).

    ``owners`` defaults to every robot whose values contain the key.
    """
    if owners is None:
        owners = owners_of(robot_values)
    return MeanResidualEvaluator(factors, owners)(robot_values)


def convergence_point(trace, fraction: float = 0.01) -> tuple[int, float]:
    """First sample whose r2_mean is within ``fraction`` of the final value.

    ``trace`` is a sequence of samples with ``communications`` and ``r2_mean``
    attributes, or of ``(communications, r2_mean)`` pairs.
    """
    samples = [(s.communications, s.r2_mean) if hasattr(s, "r2_mean") else tuple(s) for s in trace]
    if not samples:
        raise EmptyTrace("trace has no samples")
    final = samples[-1][1]
    for comms, r2 in samples:
        if abs(r2 - final) <= fraction * abs(final):
            return comms, r2
    return samples[-1]


def format_number(x: float) -> str:
    """Shortest round-tripping text for a float (``200``, ``1.05``)."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def write_summary_csv(rows: Sequence[dict], path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(SUMMARY_SCHEMA + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow(
                [
                    row["dataset"],
                    row["method"],
                    "" if row.get("beta0") is None else format_number(row["beta0"]),
                    "" if row.get("alpha") is None else format_number(row["alpha"]),
                    row["communications_at_convergence"],
                    repr(float(row["r2_mean_final"])),
                ]
            )


def read_summary_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        r["communications_at_convergence"] = int(r["communications_at_convergence"])
        r["r2_mean_final"] = float(r["r2_mean_final"])
    return rows
