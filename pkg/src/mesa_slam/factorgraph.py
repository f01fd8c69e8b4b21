"""Factor graphs and a Levenberg-Marquardt nonlinear least-squares solver.

The cost of a graph is ``sum_m ||h_m(x) - m||^2_{Sigma_m}``, i.e. the sum of
squared whitened residuals (no factor 1/2).  Factors of the same signature are
linearized together by vectorised kernels; anything without a kernel falls
back to a per-factor loop and, if it has no analytic Jacobian, to central
differences.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .manifold import (
    AngleNearPi,
    Pose,
    VariableValue,
    batch_adjoint,
    batch_between,
    batch_exp,
    batch_log,
    batch_right_jacobian_inv,
    PoseBatch,
    retract,
    stack_poses,
    stack_values,
    stack_vectors,
    tangent_dim,
    unstack_values,
)


class Key(NamedTuple):
    """Global variable identifier: originating robot and index."""

    robot: int
    index: int

    def __str__(self) -> str:
        return f"{self.robot}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "Key":
        robot, _, index = text.partition(":")
        if not _:
            raise ValueError(f"bad key {text!r}")
        return cls(int(robot), int(index))


Values = dict  # Key -> VariableValue


class MissingKey(KeyError):
    pass


class SolverError(RuntimeError):
    pass


class IndefiniteSystem(SolverError):
    """The normal equations cannot be made positive definite."""


class NonFiniteResidual(SolverError):
    pass


class InvalidNoise(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Gaussian noise given by its information matrix ``Sigma^-1``."""

    information: np.ndarray
    sqrt_information: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        info = np.atleast_2d(np.asarray(self.information, dtype=float))
        if info.shape[0] != info.shape[1] or not np.allclose(info, info.T, rtol=1e-12, atol=0):
            raise InvalidNoise("information matrix must be square and symmetric")
        try:
            lower = np.linalg.cholesky(info)
        except np.linalg.LinAlgError as exc:
            raise InvalidNoise("information matrix is not positive definite") from exc
        object.__setattr__(self, "information", info)
        object.__setattr__(self, "sqrt_information", lower.T.copy())

    @classmethod
    def from_sigmas(cls, sigmas) -> "NoiseModel":
        s = np.asarray(sigmas, dtype=float).reshape(-1)
        if np.any(s <= 0):
            raise InvalidNoise("sigmas must be positive")
        return cls(np.diag(1.0 / s**2))

    @classmethod
    def isotropic(cls, dim: int, sigma: float) -> "NoiseModel":
        return cls.from_sigmas(np.full(dim, sigma))

    @classmethod
    def from_covariance(cls, cov) -> "NoiseModel":
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, rtol=1e-12, atol=0):
            raise InvalidNoise("covariance must be square and symmetric")
        try:
            info = np.linalg.inv(cov)
        except np.linalg.LinAlgError as exc:
            raise InvalidNoise("covariance is singular") from exc
        # the inverse of a symmetric matrix is only symmetric up to rounding
        return cls(0.5 * (info + info.T))

    @property
    def dim(self) -> int:
        return self.information.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.information)

    def whiten(self, r) -> np.ndarray:
        return self.sqrt_information @ np.asarray(r, dtype=float)

    def __eq__(self, other):
        return isinstance(other, NoiseModel) and np.array_equal(self.information, other.information)

    __hash__ = None


# --------------------------------------------------------------------------
# factors


NUMERIC_STEP = 1e-6


class Factor:
    """Base measurement factor: ``error(*values)`` is ``h(x) - m`` (unwhitened)."""

    keys: tuple
    noise: NoiseModel

    @property
    def dim(self) -> int:
        return self.noise.dim

    def signature(self) -> tuple:
        """Factors with equal signatures can be evaluated as one batch."""
        return (type(self), id(self))

    def error(self, *values) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, *values) -> list[np.ndarray]:
        """Central-difference Jacobians with respect to each variable's tangent."""
        jacs = []
        for k, v in enumerate(values):
            p = tangent_dim(v)
            jk = np.zeros((self.dim, p))
            args = list(values)
            for c in range(p):
                d = np.zeros(p)
                d[c] = NUMERIC_STEP
                args[k] = retract(v, d)
                ep = self.error(*args)
                args[k] = retract(v, -d)
                em = self.error(*args)
                jk[:, c] = self._error_delta(ep, em) / (2 * NUMERIC_STEP)
            jacs.append(jk)
        return jacs

    def _error_delta(self, e1, e2):
        return e1 - e2

    @classmethod
    def batch_error(cls, factors: Sequence["Factor"], cols: Sequence) -> np.ndarray:
        """Errors ``(n, d)``; ``cols[k]`` holds the k-th variable of every factor."""
        return np.array([f.error(*row) for f, row in zip(factors, _unstack(cols))])

    @classmethod
    def batch_linearize(cls, factors, cols):
        """Return ``(errors (n, d), [J_k (n, d, p_k) for each key position])``."""
        errs, jacs = [], []
        for f, row in zip(factors, _unstack(cols)):
            errs.append(f.error(*row))
            jacs.append(f.jacobians(*row))
        return np.array(errs), [np.array(j) for j in zip(*jacs)]

    def cost(self, *values) -> float:
        w = self.noise.whiten(self.error(*values))
        return float(w @ w)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({', '.join(map(str, self.keys))})"


def _unstack(cols) -> list[tuple]:
    return list(zip(*[unstack_values(c) for c in cols]))


class FactorBatch(list):
    """A list of same-signature factors that memoizes stacked measurements."""

    def __init__(self, factors=()):
        super().__init__(factors)
        self.cache = {}


def cached_stack(factors, name: str, build):
    cache = getattr(factors, "cache", None)
    if cache is None:
        return build()
    if name not in cache:
        cache[name] = build()
    return cache[name]


def _measured(factors):
    return cached_stack(factors, "measured", lambda: stack_values([f.measured for f in factors]))


def columns(factors, values: Values) -> list:
    """Gather the factors' variables from ``values`` into per-position columns."""
    try:
        return [stack_values([values[f.keys[k]] for f in factors]) for k in range(len(factors[0].keys))]
    except KeyError as exc:
        raise MissingKey(exc.args[0]) from None


def _as_measurement(m):
    return m if isinstance(m, Pose) else np.asarray(m, dtype=float).reshape(-1)


class PriorFactor(Factor):
    """Unary factor ``Log(m^-1 x)`` on poses, ``x - m`` on points."""

    def __init__(self, key, measured: VariableValue, noise: NoiseModel):
        self.keys = (key,)
        self.measured = _as_measurement(measured)
        self.noise = noise
        if noise.dim != tangent_dim(self.measured):
            raise InvalidNoise(f"noise of dim {noise.dim} for {tangent_dim(self.measured)}-dof prior")

    def signature(self):
        m = self.measured
        return (PriorFactor, m.dim if isinstance(m, Pose) else -m.size)

    def error(self, x):
        return self.batch_error([self], [stack_values([x])])[0]

    def jacobians(self, x):
        return [j[0] for j in self.batch_linearize([self], [stack_values([x])])[1]]

    @classmethod
    def batch_error(cls, factors, cols):
        m = _measured(factors)
        if isinstance(m, PoseBatch):
            rx, tx = stack_poses(cols[0])
            return batch_log(*batch_between(m.rotation, m.translation, rx, tx))
        return stack_vectors(cols[0]) - m

    @classmethod
    def batch_linearize(cls, factors, cols):
        e = cls.batch_error(factors, cols)
        m = factors[0].measured
        if isinstance(m, Pose):
            return e, [batch_right_jacobian_inv(e, m.dim)]
        return e, [np.broadcast_to(np.eye(m.size), (len(factors), m.size, m.size))]


class BetweenFactor(Factor):
    """Relative measurement ``Log(m^-1 a^-1 b)`` on poses, ``(b - a) - m`` on points."""

    def __init__(self, key_a, key_b, measured: VariableValue, noise: NoiseModel):
        self.keys = (key_a, key_b)
        self.measured = _as_measurement(measured)
        self.noise = noise
        if noise.dim != tangent_dim(self.measured):
            raise InvalidNoise(f"noise of dim {noise.dim} for {tangent_dim(self.measured)}-dof between")

    def signature(self):
        m = self.measured
        return (BetweenFactor, m.dim if isinstance(m, Pose) else -m.size)

    def error(self, a, b):
        return self.batch_error([self], [stack_values([a]), stack_values([b])])[0]

    def jacobians(self, a, b):
        return [j[0] for j in self.batch_linearize([self], [stack_values([a]), stack_values([b])])[1]]

    @classmethod
    def batch_error(cls, factors, cols):
        return cls._errors(factors, cols)[0]

    @staticmethod
    def _errors(factors, cols):
        m = _measured(factors)
        if not isinstance(m, PoseBatch):
            return stack_vectors(cols[1]) - stack_vectors(cols[0]) - m, None
        ra, ta = stack_poses(cols[0])
        rb, tb = stack_poses(cols[1])
        rab, tab = batch_between(ra, ta, rb, tb)
        re, te = batch_between(m.rotation, m.translation, rab, tab)
        return batch_log(re, te), (rab, tab)

    @classmethod
    def batch_linearize(cls, factors, cols):
        e, rel = cls._errors(factors, cols)
        m = factors[0].measured
        n = len(factors)
        if rel is None:
            eye = np.broadcast_to(np.eye(m.size), (n, m.size, m.size))
            return e, [-eye, eye]
        jinv = batch_right_jacobian_inv(e, m.dim)
        rab, tab = rel
        # d/da: -Jr^-1(e) Ad(b^-1 a)
        rba = np.swapaxes(rab, -1, -2)
        tba = -np.einsum("nij,nj->ni", rba, tab)
        ja = -jinv @ batch_adjoint(rba, tba)
        return e, [ja, jinv]


def _position(v: VariableValue) -> np.ndarray:
    return v.translation if isinstance(v, Pose) else np.asarray(v, dtype=float)


class RangeFactor(Factor):
    """Euclidean distance between two positions (pose translations or points)."""

    def __init__(self, key_a, key_b, measured: float, noise: NoiseModel):
        self.keys = (key_a, key_b)
        self.measured = float(measured)
        self.noise = noise
        if noise.dim != 1:
            raise InvalidNoise("range noise must be 1-dimensional")

    def signature(self):
        return (RangeFactor,)

    def error(self, a, b):
        return np.array([np.linalg.norm(_position(b) - _position(a)) - self.measured])


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


class BearingRangeFactor(Factor):
    """Planar bearing (in the frame of pose ``a``) and range to position ``b``."""

    def __init__(self, key_a, key_b, bearing: float, range_: float, noise: NoiseModel):
        self.keys = (key_a, key_b)
        self.bearing = float(bearing)
        self.range = float(range_)
        self.noise = noise
        if noise.dim != 2:
            raise InvalidNoise("bearing-range noise must be 2-dimensional")

    def signature(self):
        return (BearingRangeFactor,)

    def error(self, a, b):
        if not isinstance(a, Pose) or a.dim != 2:
            raise TypeError("bearing-range requires an SE(2) pose as first variable")
        local = a.rotation.T @ (_position(b) - a.translation)
        return np.array(
            [wrap_angle(np.arctan2(local[1], local[0]) - self.bearing), np.linalg.norm(local) - self.range]
        )

    def _error_delta(self, e1, e2):
        d = e1 - e2
        d[0] = wrap_angle(d[0])
        return d


# --------------------------------------------------------------------------
# graph


class FactorGraph:
    def __init__(self, factors: Iterable[Factor] = ()):
        self.factors: list[Factor] = list(factors)

    def add(self, factor: Factor) -> None:
        self.factors.append(factor)

    def extend(self, factors: Iterable[Factor]) -> None:
        self.factors.extend(factors)

    def keys(self) -> list:
        return sorted({k for f in self.factors for k in f.keys})

    def __iter__(self):
        return iter(self.factors)

    def __len__(self) -> int:
        return len(self.factors)

    def __add__(self, other) -> "FactorGraph":
        return FactorGraph(list(self.factors) + list(other))

    def __repr__(self) -> str:
        return f"FactorGraph({len(self.factors)} factors)"


def _factors(graph) -> list[Factor]:
    return graph.factors if isinstance(graph, FactorGraph) else list(graph)


def group_factors(factors: Sequence[Factor]) -> dict:
    groups = defaultdict(list)
    for i, f in enumerate(factors):
        groups[f.signature()].append(i)
    return groups


def factor_costs(graph, values: Values) -> np.ndarray:
    """Per-factor whitened squared residuals, in graph order."""
    factors = _factors(graph)
    out = np.zeros(len(factors))
    for _, idx in group_factors(factors).items():
        fs = FactorBatch(factors[i] for i in idx)
        e = type(fs[0]).batch_error(fs, columns(fs, values))
        u = np.array([f.noise.sqrt_information for f in fs])
        w = np.einsum("nij,nj->ni", u, e)
        out[idx] = np.einsum("ni,ni->n", w, w)
    return out


def residual_norm2(graph, values: Values) -> float:
    """``sum_m ||h_m(x) - m||^2_Sigma``; exactly rounded so factor order is irrelevant."""
    return math.fsum(factor_costs(graph, values))


def linearize(factor: Factor, values: Values):
    """Whitened Jacobian blocks (one per key) and whitened residual of one factor."""
    e, jacs = type(factor).batch_linearize([factor], columns([factor], values))
    u = factor.noise.sqrt_information
    return [u @ j[0] for j in jacs], u @ e[0]


# --------------------------------------------------------------------------
# solver


@dataclass
class SolverConfig:
    max_iters: int = 100
    tol_rel: float = 1e-8
    tol_abs: float = 1e-10
    lambda_init: float = 1e-5
    lambda_factor: float = 10.0
    lambda_max: float = 1e10
    # "auto" uses dense Cholesky for small systems, CHOLMOD otherwise
    linear_solver: str = "auto"
    dense_max_dof: int = 300


class OptimizeResult(NamedTuple):
    values: Values
    residual: float
    iterations: int


def check_gauge(factors: Sequence[Factor]) -> None:
    """Raise IndefiniteSystem if some connected component has no unary factor."""
    parent: dict = {}

    def find(k):
        while parent.setdefault(k, k) != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    anchored = set()
    for f in factors:
        roots = [find(k) for k in f.keys]
        for r in roots[1:]:
            parent[find(r)] = find(roots[0])
    for f in factors:
        if len(f.keys) == 1:
            anchored.add(find(f.keys[0]))
    for k in list(parent):
        if find(k) not in anchored:
            raise IndefiniteSystem(f"component containing {k} has no prior (gauge not fixed)")


class _Group:
    __slots__ = ("cls", "factors", "sqrt_info", "row0", "dim", "slots")


class _System:
    """Fixed variable ordering and Jacobian sparsity pattern for one graph.

    Inside the solver variables live in packed stores, one per value type
    (``("pose", dim)`` or ``("vec", size)``), so factor kernels gather their
    columns by fancy indexing instead of stacking Python objects.
    """

    def __init__(self, factors: Sequence[Factor], values: Values):
        self.keys = sorted({k for f in factors for k in f.keys})
        for k in self.keys:
            if k not in values:
                raise MissingKey(k)
        self.dims = np.array([tangent_dim(values[k]) for k in self.keys], dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)]).astype(int)
        self.ndof = int(self.offsets[-1])
        # store id -> list of positions in self.keys
        members = defaultdict(list)
        self.slot = {}
        for i, k in enumerate(self.keys):
            v = values[k]
            sid = ("pose", v.dim) if isinstance(v, Pose) else ("vec", int(np.size(v)))
            self.slot[k] = (sid, len(members[sid]))
            members[sid].append(i)
        self.stores = {}
        for sid, idx in members.items():
            idx = np.array(idx)
            p = int(self.dims[idx[0]])
            self.stores[sid] = (idx, self.offsets[idx][:, None] + np.arange(p)[None, :])
        self.groups: list[_Group] = []
        row = 0
        rows_all, cols_all = [], []
        index = {k: i for i, k in enumerate(self.keys)}
        for _, fidx in group_factors(factors).items():
            g = _Group()
            g.factors = FactorBatch(factors[i] for i in fidx)
            g.cls = type(g.factors[0])
            g.dim = g.factors[0].dim
            g.sqrt_info = np.array([f.noise.sqrt_information for f in g.factors])
            g.row0 = row
            g.slots = []
            n, d = len(g.factors), g.dim
            base = row + np.arange(n)[:, None] * d + np.arange(d)[None, :]
            for pos in range(len(g.factors[0].keys)):
                sids = {self.slot[f.keys[pos]][0] for f in g.factors}
                if len(sids) != 1:
                    raise TypeError(f"mixed variable types at position {pos} of {g.cls.__name__}")
                g.slots.append((sids.pop(), np.array([self.slot[f.keys[pos]][1] for f in g.factors])))
                ki = np.array([index[f.keys[pos]] for f in g.factors])
                pk = int(self.dims[ki[0]])
                r = np.broadcast_to(base[:, :, None], (n, d, pk))
                c = np.broadcast_to(self.offsets[ki][:, None, None] + np.arange(pk)[None, None, :], (n, d, pk))
                rows_all.append(r.ravel())
                cols_all.append(c.ravel())
            row += n * d
            self.groups.append(g)
        self.nrows = row
        jrows = np.concatenate(rows_all) if rows_all else np.zeros(0, int)
        jcols = np.concatenate(cols_all) if cols_all else np.zeros(0, int)
        # csr layout of the Jacobian pattern and the permutation from kernel order
        probe = sp.csr_matrix(
            (np.arange(1, jrows.size + 1, dtype=float), (jrows, jcols)), shape=(self.nrows, self.ndof)
        )
        self.csr_perm = probe.data.astype(np.int64) - 1
        self.csr_indices = probe.indices
        self.csr_indptr = probe.indptr
        self.symbolic = None

    def pack(self, values: Values) -> dict:
        state = {}
        for sid, (idx, _) in self.stores.items():
            vals = [values[self.keys[i]] for i in idx]
            state[sid] = stack_poses(vals) if sid[0] == "pose" else stack_vectors(vals)
        return state

    def unpack(self, state: dict, values: Values) -> Values:
        out = dict(values)
        for sid, (idx, _) in self.stores.items():
            col = state[sid]
            for n, i in enumerate(idx):
                out[self.keys[i]] = col.pose(n) if sid[0] == "pose" else col[n].copy()
        return out

    @staticmethod
    def _columns(g: _Group, state: dict) -> list:
        cols = []
        for sid, ix in g.slots:
            col = state[sid]
            cols.append(PoseBatch(col.rotation[ix], col.translation[ix]) if sid[0] == "pose" else col[ix])
        return cols

    def cost(self, state: dict) -> float:
        total = 0.0
        for g in self.groups:
            e = g.cls.batch_error(g.factors, self._columns(g, state))
            w = np.einsum("nij,nj->ni", g.sqrt_info, e)
            total += float(np.einsum("ni,ni->", w, w))
        return total

    def linearize(self, state: dict):
        r = np.empty(self.nrows)
        data = []
        for g in self.groups:
            e, jacs = g.cls.batch_linearize(g.factors, self._columns(g, state))
            w = np.einsum("nij,nj->ni", g.sqrt_info, e)
            r[g.row0 : g.row0 + w.size] = w.ravel()
            for j in jacs:
                data.append((g.sqrt_info @ j).ravel())
        flat = np.concatenate(data) if data else np.zeros(0)
        jac = sp.csr_matrix(
            (flat[self.csr_perm], self.csr_indices, self.csr_indptr), shape=(self.nrows, self.ndof)
        )
        return jac, r

    def retract(self, state: dict, delta: np.ndarray) -> dict:
        out = {}
        for sid, (_, gather) in self.stores.items():
            d = delta[gather]
            col = state[sid]
            if sid[0] == "pose":
                re, te = batch_exp(d, sid[1])
                out[sid] = PoseBatch(
                    col.rotation @ re, np.einsum("nij,nj->ni", col.rotation, te) + col.translation
                )
            else:
                out[sid] = col + d
        return out


def _solve_dense(system: _System, h: sp.spmatrix, g: np.ndarray, lam: float):
    a = h.toarray()
    a[np.diag_indices_from(a)] += lam
    try:
        c = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    return scipy.linalg.cho_solve(c, g, check_finite=False)


def _solve_cholmod(system: _System, h: sp.spmatrix, g: np.ndarray, lam: float):
    from cvxopt import cholmod, matrix, spmatrix

    a = sp.tril(h + lam * sp.identity(h.shape[0], format="csr"), format="coo")
    m = spmatrix(matrix(a.data), matrix(a.row.astype(np.int32)), matrix(a.col.astype(np.int32)), a.shape)
    # the Hessian pattern is fixed, so the fill-reducing analysis is done once
    pattern = np.concatenate([a.row, a.col])
    if system.symbolic is None or not np.array_equal(system.symbolic[1], pattern):
        system.symbolic = (cholmod.symbolic(m), pattern)
    f = system.symbolic[0]
    try:
        cholmod.numeric(m, f)
    except ArithmeticError:
        return None
    b = matrix(np.asarray(g, dtype=float).reshape(-1, 1))
    cholmod.solve(f, b)
    return np.array(b).reshape(-1)


def optimize(graph, initial: Values, config: SolverConfig | None = None) -> OptimizeResult:
    """Levenberg-Marquardt from ``initial``; variables not in the graph pass through."""
    config = config or SolverConfig()
    factors = _factors(graph)
    check_gauge(factors)
    system = _System(factors, initial)
    values = system.pack(initial)
    cost = system.cost(values)
    if not math.isfinite(cost):
        raise NonFiniteResidual(f"initial residual is {cost}")
    if system.ndof == 0:
        return OptimizeResult(dict(initial), cost, 0)
    use_dense = config.linear_solver == "dense" or (
        config.linear_solver == "auto" and system.ndof <= config.dense_max_dof
    )
    solve = _solve_dense if use_dense else _solve_cholmod
    lam = config.lambda_init
    iterations = 0
    while iterations < config.max_iters:
        jac, r = system.linearize(values)
        jt = jac.T.tocsr()
        h = (jt @ jac).tocsr()
        grad = jt @ r
        accepted = False
        while True:
            step = solve(system, h, -grad, lam)
            if step is not None:
                trial = system.retract(values, step)
                try:
                    new_cost = system.cost(trial)
                except AngleNearPi:
                    # a step onto a logarithm singularity is rejected like a cost increase
                    new_cost = math.inf
                if math.isfinite(new_cost) and new_cost <= cost:
                    accepted = True
                    break
            elif lam >= config.lambda_max:
                raise IndefiniteSystem("normal equations not positive definite at maximum damping")
            if lam >= config.lambda_max:
                break
            lam = max(lam * config.lambda_factor, 1e-12)
        if not accepted:
            break
        iterations += 1
        lam = lam / config.lambda_factor
        change = cost - new_cost
        values, cost = trial, new_cost
        if change < config.tol_abs or change < config.tol_rel * (cost + change):
            break
    return OptimizeResult(system.unpack(values, initial), cost, iterations)
