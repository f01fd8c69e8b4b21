"""Manifold, edge-based, separable consensus ADMM (MESA).

Each robot keeps its own copy of every variable it observes.  Consistency of
copies held by neighbouring robots ``i`` and ``j`` is enforced through a
constraint ``q(theta, z)`` against an edge variable ``z``; the dual and penalty
terms enter the robot's local factor graph as biased priors

    (beta / 2) * || q(theta, z) + lambda / beta ||^2

and whenever ``i`` and ``j`` communicate both robots re-solve locally, swap
their copies of the shared variables, and update ``z``, ``lambda`` and
``beta``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

import numpy as np

from .factorgraph import Factor, NoiseModel, SolverConfig, Values, cached_stack, optimize
from .manifold import (
    Pose,
    VariableValue,
    batch_between,
    batch_log,
    batch_right_jacobian_inv,
    chordal_vec,
    hat3,
    log_map,
    so3_log,
    so3_right_jacobian_inv,
    split_interpolate,
    stack_poses,
    stack_values,
    stack_vectors,
)


class ConstraintKind(str, Enum):
    GEODESIC = "geodesic"
    APPROX_GEODESIC = "apx-geo"
    SPLIT = "split"
    CHORDAL = "chordal"
    LINEAR = "linear"


class KindTypeMismatch(TypeError):
    pass


def _check_kind(kind: ConstraintKind, theta) -> None:
    is_pose = isinstance(theta, Pose)
    if (kind is ConstraintKind.LINEAR) == is_pose:
        raise KindTypeMismatch(f"{kind.value} constraint on {type(theta).__name__}")


def constraint_dim(kind: ConstraintKind, theta: VariableValue) -> int:
    kind = ConstraintKind(kind)
    _check_kind(kind, theta)
    if kind is ConstraintKind.LINEAR:
        return int(np.size(theta))
    if kind is ConstraintKind.CHORDAL:
        return theta.dim**2 + theta.dim
    return theta.tangent_dim


def edge_value(kind: ConstraintKind, theta: VariableValue):
    """Map a variable into the space its edge variables live in."""
    kind = ConstraintKind(kind)
    _check_kind(kind, theta)
    if kind is ConstraintKind.APPROX_GEODESIC:
        return log_map(theta)
    if kind is ConstraintKind.CHORDAL:
        return chordal_vec(theta)
    if kind is ConstraintKind.LINEAR:
        return np.asarray(theta, dtype=float).copy()
    return theta


def _generators(dim: int) -> np.ndarray:
    if dim == 2:
        return np.array([[[0.0, -1.0], [1.0, 0.0]]])
    return hat3(np.eye(3))


def batch_constraint(kind: ConstraintKind, thetas, zs, jacobians: bool = False):
    """``q(theta, z)`` for stacks of values, optionally with d q / d theta."""
    kind = ConstraintKind(kind)
    if kind is ConstraintKind.LINEAR:
        q = stack_vectors(thetas) - stack_vectors(zs)
        n = q.shape[0]
        return (q, np.broadcast_to(np.eye(q.shape[1]), (n, q.shape[1], q.shape[1]))) if jacobians else q
    rt, tt = stack_poses(thetas)
    n, dim = tt.shape
    if kind is ConstraintKind.GEODESIC:
        rz, tz = stack_poses(zs)
        q = batch_log(*batch_between(rz, tz, rt, tt))
        jac = batch_right_jacobian_inv(q, dim) if jacobians else None
    elif kind is ConstraintKind.SPLIT:
        rz, tz = stack_poses(zs)
        rrel = np.swapaxes(rz, -1, -2) @ rt
        if dim == 2:
            rot = np.arctan2(rrel[:, 1, 0], rrel[:, 0, 0])[:, None]
            if np.any(np.abs(rot) > np.pi - 1e-6):
                batch_log(rrel, np.zeros((n, 2)))  # raises AngleNearPi
        else:
            rot = so3_log(rrel)
        q = np.concatenate([rot, tt - tz], -1)
        jac = None
        if jacobians:
            k = rot.shape[1]
            jac = np.zeros((n, q.shape[1], q.shape[1]))
            jac[:, :k, :k] = 1.0 if dim == 2 else so3_right_jacobian_inv(rot)
            jac[:, k:, k:] = rt
    elif kind is ConstraintKind.APPROX_GEODESIC:
        lt = batch_log(rt, tt)
        q = lt - stack_vectors(zs)
        jac = batch_right_jacobian_inv(lt, dim) if jacobians else None
    else:  # chordal
        vt = np.concatenate([rt.reshape(n, -1), tt], -1)
        q = vt - stack_vectors(zs)
        jac = None
        if jacobians:
            gens = _generators(dim)
            k = gens.shape[0]
            jac = np.zeros((n, q.shape[1], k + dim))
            # d vec(R Exp(d)) / d phi_c = vec(R G_c); d t / d rho = R
            jac[:, : dim * dim, :k] = np.einsum("nij,cjk->nikc", rt, gens).reshape(n, dim * dim, k)
            jac[:, dim * dim :, k:] = rt
    return (q, jac) if jacobians else q


def constraint_eval(kind: ConstraintKind, theta: VariableValue, z) -> np.ndarray:
    kind = ConstraintKind(kind)
    _check_kind(kind, theta)
    if kind in (ConstraintKind.GEODESIC, ConstraintKind.SPLIT) and not isinstance(z, Pose):
        raise KindTypeMismatch(f"{kind.value} edge variable must be a pose")
    if kind in (ConstraintKind.APPROX_GEODESIC, ConstraintKind.CHORDAL) and isinstance(z, Pose):
        raise KindTypeMismatch(f"{kind.value} edge variable must be a vector")
    return batch_constraint(kind, [theta], [z])[0]


def constraint_gap(kind: ConstraintKind, theta_i: VariableValue, theta_j: VariableValue) -> np.ndarray:
    """``q(theta_i, theta_j)``: the disagreement between two copies."""
    return constraint_eval(kind, theta_i, edge_value(kind, theta_j))


def z_update(kind: ConstraintKind, theta_i: VariableValue, theta_j: VariableValue):
    """Closed-form edge variable shared by both directions of an edge."""
    kind = ConstraintKind(kind)
    _check_kind(kind, theta_i)
    _check_kind(kind, theta_j)
    if kind in (ConstraintKind.GEODESIC, ConstraintKind.SPLIT):
        # zero-dual approximation for geodesic
        return split_interpolate(theta_i, theta_j, 0.5)
    return 0.5 * (edge_value(kind, theta_i) + edge_value(kind, theta_j))


def dual_update(lam, beta: float, theta_i, theta_j, kind: ConstraintKind) -> np.ndarray:
    return np.asarray(lam, dtype=float) + beta * constraint_gap(kind, theta_i, theta_j)


class BiasedPriorFactor(Factor):
    """Unary factor with residual ``q(theta, z) + lambda / beta`` and information ``beta * I``."""

    def __init__(self, kind: ConstraintKind, key, z, lam, beta: float):
        if not beta > 0:
            raise ValueError("beta must be positive")
        self.kind = ConstraintKind(kind)
        self.keys = (key,)
        self.z = z
        self.lam = np.asarray(lam, dtype=float).reshape(-1)
        self.beta = float(beta)
        self.noise = NoiseModel(self.beta * np.eye(self.lam.size))

    def signature(self):
        zdim = self.z.dim if isinstance(self.z, Pose) else -np.size(self.z)
        return (BiasedPriorFactor, self.kind, zdim, self.lam.size)

    def error(self, theta):
        return self.batch_error([self], [stack_values([theta])])[0]

    def jacobians(self, theta):
        return [self.batch_linearize([self], [stack_values([theta])])[1][0][0]]

    @staticmethod
    def _zs(factors):
        return cached_stack(factors, "z", lambda: stack_values([f.z for f in factors]))

    @staticmethod
    def _bias(factors):
        return cached_stack(factors, "bias", lambda: np.array([f.lam / f.beta for f in factors]))

    @classmethod
    def batch_error(cls, factors, cols):
        q = batch_constraint(factors[0].kind, cols[0], cls._zs(factors))
        return q + cls._bias(factors)

    @classmethod
    def batch_linearize(cls, factors, cols):
        q, jac = batch_constraint(factors[0].kind, cols[0], cls._zs(factors), jacobians=True)
        return q + cls._bias(factors), [jac]


def build_biased_prior(kind: ConstraintKind, key, z, lam, beta: float) -> BiasedPriorFactor:
    return BiasedPriorFactor(kind, key, z, lam, beta)


# --------------------------------------------------------------------------
# robots


@dataclass
class EdgeState:
    """Robot-side state for one shared variable on one directed edge."""

    z: object
    lam: np.ndarray
    beta: float
    alpha: float = 1.0


@dataclass
class MesaConfig:
    beta0: float = 200.0
    alpha: float = 1.0
    pose_kind: ConstraintKind = ConstraintKind.GEODESIC
    point_kind: ConstraintKind = ConstraintKind.LINEAR
    solver: SolverConfig = field(default_factory=SolverConfig)
    # "theta": lambda += beta q(theta_i, theta_j); "z": lambda += beta q(theta_i, z)
    dual_mode: str = "theta"

    def __post_init__(self):
        self.pose_kind = ConstraintKind(self.pose_kind)
        self.point_kind = ConstraintKind(self.point_kind)
        if not self.beta0 > 0:
            raise ValueError("beta0 must be positive")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.point_kind is not ConstraintKind.LINEAR:
            raise ValueError("Euclidean variables only support the linear constraint")
        if self.dual_mode not in ("theta", "z"):
            raise ValueError(f"unknown dual mode {self.dual_mode!r}")

    def kind_for(self, value: VariableValue) -> ConstraintKind:
        return self.pose_kind if isinstance(value, Pose) else self.point_kind


# profile -> (beta0, alpha); split overrides alpha only in the default profile
_PROFILES = {
    "pose": (200.0, 1.0),
    "range": (2.0, 1.05),
    "benchmark": (2.0, 1.05),
}
_SPLIT_ALPHA = 1.2


def default_hyperparameters(kind, profile: str = "pose") -> tuple[float, float]:
    """Default ``(beta0, alpha)`` for a variant under an experiment profile."""
    kind = ConstraintKind(kind)
    try:
        beta0, alpha = _PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown profile {profile!r}") from None
    if profile == "pose" and kind is ConstraintKind.SPLIT:
        alpha = _SPLIT_ALPHA
    return beta0, alpha


def variant_config(kind, profile: str = "pose", **overrides) -> MesaConfig:
    beta0, alpha = default_hyperparameters(kind, profile)
    cfg = MesaConfig(beta0=beta0, alpha=alpha, pose_kind=ConstraintKind(kind))
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class RobotNode:
    id: int
    factors: list
    values: Values
    # neighbour id -> shared key -> edge state
    edges: dict = field(default_factory=dict)

    @property
    def neighbors(self) -> list[int]:
        return sorted(self.edges)

    def shared_keys(self, other: int) -> list:
        return sorted(self.edges.get(other, {}))

    def biased_priors(self, config: MesaConfig) -> list[BiasedPriorFactor]:
        out = []
        for j in self.neighbors:
            for key, es in sorted(self.edges[j].items()):
                kind = config.kind_for(self.values[key])
                out.append(build_biased_prior(kind, key, es.z, es.lam, es.beta))
        return out

    def message(self, other: int) -> list[tuple]:
        """Payload sent to ``other``: this robot's copies of the shared variables."""
        return [(k, self.values[k]) for k in self.shared_keys(other)]


def local_solve(robot: RobotNode, config: MesaConfig) -> Values:
    graph = list(robot.factors) + robot.biased_priors(config)
    if not graph:
        return dict(robot.values)
    return optimize(graph, robot.values, config.solver).values


def mesa_edge_step(robot_i: RobotNode, robot_j: RobotNode, config: MesaConfig,
                   message_log: list | None = None, executor: ThreadPoolExecutor | None = None) -> None:
    """One communication between ``robot_i`` and ``robot_j``."""
    if executor is not None:
        fi = executor.submit(local_solve, robot_i, config)
        fj = executor.submit(local_solve, robot_j, config)
        robot_i.values, robot_j.values = fi.result(), fj.result()
    else:
        robot_i.values = local_solve(robot_i, config)
        robot_j.values = local_solve(robot_j, config)
    msg_i = robot_i.message(robot_j.id)
    msg_j = robot_j.message(robot_i.id)
    if message_log is not None:
        message_log.append(((robot_i.id, robot_j.id), msg_i, msg_j))
    received_by_i = dict(msg_j)
    i, j = robot_i.id, robot_j.id
    for key, theta_i in msg_i:
        theta_j = received_by_i[key]
        kind = config.kind_for(theta_i)
        z = z_update(kind, theta_i, theta_j)
        ei = robot_i.edges[j][key]
        ej = robot_j.edges[i][key]
        ei.z = z
        ej.z = z
        if config.dual_mode == "theta":
            ei.lam = dual_update(ei.lam, ei.beta, theta_i, theta_j, kind)
            ej.lam = dual_update(ej.lam, ej.beta, theta_j, theta_i, kind)
        else:
            ei.lam = ei.lam + ei.beta * constraint_eval(kind, theta_i, z)
            ej.lam = ej.lam + ej.beta * constraint_eval(kind, theta_j, z)
        ei.beta *= ei.alpha
        ej.beta *= ej.alpha


def init_edges(robots: dict, config: MesaConfig) -> None:
    """Zero duals, ``z`` at each robot's own current copy, ``beta = beta0``."""
    for i, ri in robots.items():
        for j, rj in robots.items():
            if i == j:
                continue
            shared = sorted(set(ri.values) & set(rj.values))
            if not shared:
                continue
            states = {}
            for key in shared:
                theta = ri.values[key]
                kind = config.kind_for(theta)
                states[key] = EdgeState(
                    z=edge_value(kind, theta),
                    lam=np.zeros(constraint_dim(kind, theta)),
                    beta=config.beta0,
                    alpha=config.alpha,
                )
            ri.edges[j] = states


def build_team(factors: dict, initial: dict, config: MesaConfig) -> dict[int, RobotNode]:
    """Robots from per-robot factor lists and per-robot initial copies."""
    robots = {
        i: RobotNode(i, list(factors.get(i, [])), dict(initial[i])) for i in sorted(initial)
    }
    init_edges(robots, config)
    return robots


def max_gap(robots: dict, config: MesaConfig) -> float:
    """Largest ``||q(theta_si, theta_sj)||_inf`` over all edges and shared variables."""
    gap = 0.0
    for i, ri in robots.items():
        for j in ri.neighbors:
            if j < i:
                continue
            rj = robots[j]
            for key in ri.shared_keys(j):
                kind = config.kind_for(ri.values[key])
                g = constraint_gap(kind, ri.values[key], rj.values[key])
                gap = max(gap, float(np.abs(g).max()))
    return gap


@dataclass
class StopCriteria:
    max_communications: int | None = None
    gap_tol: float = 1e-6


@dataclass(frozen=True)
class TraceSample:
    event_index: int
    edge: tuple
    executed: bool
    communications: int
    r2_mean: float
    max_gap: float


@dataclass
class Trace:
    samples: list = field(default_factory=list)
    # "converged" | "budget" | "exhausted"
    status: str = "exhausted"
    attempts: int = 0

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def communications(self) -> int:
        return self.samples[-1].communications if self.samples else 0

    @property
    def final_r2(self) -> float:
        return self.samples[-1].r2_mean if self.samples else math.nan


def _as_events(schedule):
    from .netsim import Event

    for n, ev in enumerate(schedule):
        yield ev if isinstance(ev, Event) else Event(n, tuple(ev), True)


def run(robots: dict, schedule: Iterable, config: MesaConfig,
        stop: StopCriteria | None = None, evaluator=None, on_step=None) -> Trace:
    """Consume communication events until converged, out of budget, or out of events.

    ``schedule`` yields ``netsim.Event`` objects or plain ``(i, j)`` edges.
    Robots without neighbours never communicate; they are solved once up front.
    """
    from .metrics import MeanResidualEvaluator

    stop = stop or StopCriteria()
    if evaluator is None:
        evaluator = MeanResidualEvaluator.for_robots(robots)
    for r in robots.values():
        if not r.edges and r.factors:
            r.values = local_solve(r, config)
    trace = Trace()
    comms = 0
    r2 = gap = None
    for ev in _as_events(schedule):
        if stop.max_communications is not None and comms >= stop.max_communications:
            trace.status = "budget"
            break
        trace.attempts += 1
        i, j = ev.edge
        if ev.executed:
            mesa_edge_step(robots[i], robots[j], config)
            comms += 1
            r2 = gap = None
        if r2 is None:
            r2 = evaluator({k: r.values for k, r in robots.items()})
            gap = max_gap(robots, config)
        trace.samples.append(TraceSample(ev.index, (i, j), bool(ev.executed), comms, r2, gap))
        if on_step is not None:
            on_step(trace.samples[-1])
        if ev.executed and gap < stop.gap_tol:
            trace.status = "converged"
            break
    else:
        if stop.max_communications is not None and comms >= stop.max_communications:
            trace.status = "budget"
    return trace
