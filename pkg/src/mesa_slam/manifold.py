"""Lie-group primitives for SE(2), SE(3) and Euclidean variables.

Tangent vectors always put the rotation block first, then translation:
``[theta, rho_x, rho_y]`` for SE(2) and ``[phi_x, phi_y, phi_z, rho_x, rho_y,
rho_z]`` for SE(3). Perturbations are applied on the right, ``x * Exp(d)``.

The ``batch_*`` functions operate on stacks of rotations / translations with a
leading batch axis and back the vectorised factor kernels. The single-element
functions (``compose``, ``log_map`` ...) wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

# distance to pi at which the logarithm is considered singular
NEAR_PI_TOL = 1e-6
# below this angle the closed forms are replaced by Taylor series
_SMALL_ANGLE = 1e-2
# above this angle (SO(3)) the axis is recovered from the symmetric part
_LARGE_ANGLE = 2.5


class AngleNearPi(ValueError):
    """Rotation angle within ``NEAR_PI_TOL`` of pi: the logarithm is undefined."""


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t`` in 2 or 3 dimensions."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if r.shape not in ((2, 2), (3, 3)) or t.shape[0] != r.shape[0]:
            raise DimensionMismatch(f"bad pose shapes {r.shape} / {t.shape}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]

    @property
    def tangent_dim(self) -> int:
        return 3 if self.dim == 2 else 6

    @classmethod
    def identity(cls, dim: int = 3) -> "Pose":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def from_xytheta(cls, x: float, y: float, theta: float) -> "Pose":
        c, s = np.cos(theta), np.sin(theta)
        return cls(np.array([[c, -s], [s, c]]), np.array([x, y]))

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> "Pose":
        q = np.asarray(quat_xyzw, dtype=float)
        n = np.linalg.norm(q)
        if n == 0.0:
            raise ValueError("zero quaternion")
        return cls(Rotation.from_quat(q / n).as_matrix(), translation)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        n = m.shape[0] - 1
        return cls(m[:n, :n], m[:n, n])

    def matrix(self) -> np.ndarray:
        n = self.dim
        m = np.eye(n + 1)
        m[:n, :n] = self.rotation
        m[:n, n] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``[qx, qy, qz, qw]`` with ``qw >= 0`` (SE(3) only)."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    @property
    def theta(self) -> float:
        """Heading angle (SE(2) only)."""
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def transform_point(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.abs(r.T @ r - np.eye(self.dim)).max() < tol
            and abs(np.linalg.det(r) - 1.0) < tol
        )

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __repr__(self) -> str:
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


VariableValue = Union[Pose, np.ndarray]


def tangent_dim(value: VariableValue) -> int:
    if isinstance(value, Pose):
        return value.tangent_dim
    return int(np.size(value))


def pose_tangent_dim(dim: int) -> int:
    return 3 if dim == 2 else 6


# --------------------------------------------------------------------------
# batched SO(2) / SO(3)


def hat3(w: np.ndarray) -> np.ndarray:
    """Skew matrices of a ``(n, 3)`` stack."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _so3_coeffs(theta: np.ndarray):
    """``sin(t)/t``, ``(1-cos t)/t^2`` and ``(t - sin t)/t^3`` with series near 0."""
    small = theta < _SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(ts)) / ts**2)
    c = np.where(
        small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (ts - np.sin(ts)) / ts**3
    )
    return a, b, c


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _so3_coeffs(theta)
    k = hat3(phi)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation vectors of a ``(n, 3, 3)`` stack on the principal branch."""
    r = np.asarray(r, dtype=float)
    w = 0.5 * np.stack(
        [r[..., 2, 1] - r[..., 1, 2], r[..., 0, 2] - r[..., 2, 0], r[..., 1, 0] - r[..., 0, 1]],
        axis=-1,
    )
    cos = np.clip(0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    sin = np.linalg.norm(w, axis=-1)
    theta = np.arctan2(sin, cos)
    if np.any(theta > np.pi - NEAR_PI_TOL):
        raise AngleNearPi(f"rotation angle {theta.max():.9f} is within {NEAR_PI_TOL} of pi")
    small = theta < _SMALL_ANGLE
    t2 = theta * theta
    scale = np.where(small, 1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0, theta / np.where(small, 1.0, sin))
    phi = scale[..., None] * w
    large = theta > _LARGE_ANGLE
    if np.any(large):
        # sin(theta) is poorly conditioned here; use B = (R + R^T)/2 - cos I = (1 - cos) a a^T
        rl = r[large]
        cl = cos[large]
        b = 0.5 * (rl + np.swapaxes(rl, -1, -2)) - cl[:, None, None] * np.eye(3)
        diag = np.diagonal(b, axis1=-2, axis2=-1)
        k = np.argmax(diag, axis=-1)
        idx = np.arange(len(k))
        axis = b[idx, :, k]
        axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
        sign = np.where(np.einsum("ij,ij->i", axis, w[large]) < 0, -1.0, 1.0)
        phi[large] = (sign * theta[large])[:, None] * axis
    return phi


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _so3_coeffs(theta)
    k = hat3(phi)
    return np.eye(3) + b[..., None, None] * k + c[..., None, None] * (k @ k)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < _SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    t2 = theta * theta
    d = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
        1.0 / ts**2 - (1.0 + np.cos(ts)) / (2.0 * ts * np.sin(np.where(small, 1.0, ts))),
    )
    k = hat3(phi)
    return np.eye(3) - 0.5 * k + d[..., None, None] * (k @ k)


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


def so2_exp(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def so2_log(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    theta = np.arctan2(r[..., 1, 0], r[..., 0, 0])
    if np.any(np.abs(theta) > np.pi - NEAR_PI_TOL):
        raise AngleNearPi(f"rotation angle {np.abs(theta).max():.9f} is within {NEAR_PI_TOL} of pi")
    return theta


def _se2_v(theta: np.ndarray):
    """Entries ``(a, b)`` of ``V = [[a, -b], [b, a]]`` with ``t = V rho``."""
    small = np.abs(theta) < _SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(ts) / ts)
    b = np.where(small, theta / 2.0 - theta * t2 / 24.0, (1.0 - np.cos(ts)) / ts)
    return a, b


# --------------------------------------------------------------------------
# batched SE(N)


def batch_exp(tau: np.ndarray, dim: int):
    """``(R, t)`` stacks of ``Exp(tau)`` for a ``(n, p)`` stack of tangents."""
    tau = np.atleast_2d(np.asarray(tau, dtype=float))
    if dim == 2:
        theta, rho = tau[:, 0], tau[:, 1:3]
        a, b = _se2_v(theta)
        t = np.stack([a * rho[:, 0] - b * rho[:, 1], b * rho[:, 0] + a * rho[:, 1]], -1)
        return so2_exp(theta), t
    phi, rho = tau[:, :3], tau[:, 3:6]
    r = so3_exp(phi)
    t = np.einsum("nij,nj->ni", so3_left_jacobian(phi), rho)
    return r, t


def batch_log(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    dim = r.shape[-1]
    if dim == 2:
        theta = so2_log(r)
        a, b = _se2_v(theta)
        det = a * a + b * b
        rho = np.stack([a * t[:, 0] + b * t[:, 1], -b * t[:, 0] + a * t[:, 1]], -1) / det[:, None]
        return np.concatenate([theta[:, None], rho], -1)
    phi = so3_log(r)
    rho = np.einsum("nij,nj->ni", so3_left_jacobian_inv(phi), t)
    return np.concatenate([phi, rho], -1)


def batch_compose(ra, ta, rb, tb):
    return ra @ rb, np.einsum("nij,nj->ni", ra, tb) + ta


def batch_inverse(r, t):
    rt = np.swapaxes(r, -1, -2)
    return rt, -np.einsum("nij,nj->ni", rt, t)


def batch_between(ra, ta, rb, tb):
    """``a^-1 * b``."""
    rat = np.swapaxes(ra, -1, -2)
    return rat @ rb, np.einsum("nij,nj->ni", rat, tb - ta)


def batch_adjoint(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Adjoint matrices in rotation-first tangent ordering."""
    n = r.shape[0]
    if r.shape[-1] == 2:
        ad = np.zeros((n, 3, 3))
        ad[:, 0, 0] = 1.0
        ad[:, 1, 0] = t[:, 1]
        ad[:, 2, 0] = -t[:, 0]
        ad[:, 1:, 1:] = r
        return ad
    ad = np.zeros((n, 6, 6))
    ad[:, :3, :3] = r
    ad[:, 3:, 3:] = r
    ad[:, 3:, :3] = hat3(t) @ r
    return ad


def _se3_q(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    # off-diagonal block of the SE(3) left Jacobian
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < _SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    t2 = theta * theta
    s, c = np.sin(ts), np.cos(ts)
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (ts - s) / ts**3)
    c2 = np.where(
        small, 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0, (ts * ts + 2.0 * c - 2.0) / (2.0 * ts**4)
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        (2.0 * ts - 3.0 * s + ts * c) / (2.0 * ts**5),
    )
    p = hat3(phi)
    q = hat3(rho)
    pq = p @ q
    qp = q @ p
    pqp = pq @ p
    return (
        0.5 * q
        + c1[:, None, None] * (pq + qp + pqp)
        + c2[:, None, None] * (p @ pq + qp @ p - 3.0 * pqp)
        + c3[:, None, None] * (pqp @ p + p @ pqp)
    )


def se3_right_jacobian(tau: np.ndarray) -> np.ndarray:
    tau = np.atleast_2d(np.asarray(tau, dtype=float))
    phi, rho = -tau[:, :3], -tau[:, 3:6]
    jl = so3_left_jacobian(phi)
    out = np.zeros((tau.shape[0], 6, 6))
    out[:, :3, :3] = jl
    out[:, 3:, 3:] = jl
    out[:, 3:, :3] = _se3_q(phi, rho)
    return out


_SE2_IN_SE3 = np.array([2, 3, 4])


def batch_right_jacobian(tau: np.ndarray, dim: int) -> np.ndarray:
    tau = np.atleast_2d(np.asarray(tau, dtype=float))
    if dim == 3:
        return se3_right_jacobian(tau)
    # se(2) is an ad-invariant subalgebra of se(3): restrict the SE(3) Jacobian
    lifted = np.zeros((tau.shape[0], 6))
    lifted[:, 2:5] = tau
    j = se3_right_jacobian(lifted)
    return j[:, _SE2_IN_SE3[:, None], _SE2_IN_SE3[None, :]]


def batch_right_jacobian_inv(tau: np.ndarray, dim: int) -> np.ndarray:
    return np.linalg.inv(batch_right_jacobian(tau, dim))


class PoseBatch(NamedTuple):
    """A stack of poses: rotations ``(n, d, d)`` and translations ``(n, d)``."""

    rotation: np.ndarray
    translation: np.ndarray

    @property
    def size(self) -> int:
        return self.rotation.shape[0]

    def pose(self, i: int) -> Pose:
        return Pose(self.rotation[i], self.translation[i])

    def poses(self) -> list[Pose]:
        return [Pose(r, t) for r, t in zip(self.rotation, self.translation)]


def stack_poses(poses) -> PoseBatch:
    if isinstance(poses, PoseBatch):
        return poses
    return PoseBatch(
        np.array([p.rotation for p in poses]),
        np.array([p.translation for p in poses]),
    )


def stack_vectors(vs) -> np.ndarray:
    if isinstance(vs, np.ndarray) and vs.ndim == 2:
        return vs
    return np.array([np.asarray(v, dtype=float).reshape(-1) for v in vs])


def stack_values(values):
    """Column form of a homogeneous sequence of values: PoseBatch or ``(n, k)`` array."""
    if isinstance(values, (PoseBatch, np.ndarray)):
        return values
    return stack_poses(values) if isinstance(values[0], Pose) else stack_vectors(values)


def unstack_values(column) -> list:
    return column.poses() if isinstance(column, PoseBatch) else list(column)


# --------------------------------------------------------------------------
# single-element API


def _check_same_dim(a: Pose, b: Pose):
    if a.dim != b.dim:
        raise DimensionMismatch(f"SE({a.dim}) vs SE({b.dim})")


def compose(a: Pose, b: Pose) -> Pose:
    _check_same_dim(a, b)
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def between(a: Pose, b: Pose) -> Pose:
    """Relative pose ``a^-1 * b``."""
    _check_same_dim(a, b)
    rt = a.rotation.T
    return Pose(rt @ b.rotation, rt @ (b.translation - a.translation))


def log_map(p: Pose) -> np.ndarray:
    return batch_log(p.rotation[None], p.translation[None])[0]


def exp_map(v, dim: int | None = None) -> Pose:
    v = np.asarray(v, dtype=float).reshape(-1)
    if dim is None:
        dim = {3: 2, 6: 3}.get(v.size)
        if dim is None:
            raise DimensionMismatch(f"tangent of size {v.size} is neither se(2) nor se(3)")
    elif v.size != pose_tangent_dim(dim):
        raise DimensionMismatch(f"tangent of size {v.size} for SE({dim})")
    r, t = batch_exp(v[None], dim)
    return Pose(r[0], t[0])


def rotation_log(r: np.ndarray) -> np.ndarray:
    """Rotation vector (length 1 in 2D, 3 in 3D)."""
    r = np.asarray(r, dtype=float)
    if r.shape[-1] == 2:
        return np.atleast_1d(so2_log(r[None])[0])
    return so3_log(r[None])[0]


def rotation_exp(w) -> np.ndarray:
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if w.size == 1:
        return so2_exp(w[0])
    return so3_exp(w[None])[0]


def split_interpolate(a: Pose, b: Pose, t: float) -> Pose:
    """Linear interpolation of translation and geodesic (slerp) of rotation."""
    _check_same_dim(a, b)
    rel = rotation_log(a.rotation.T @ b.rotation)
    rot = a.rotation @ rotation_exp(t * rel)
    return Pose(rot, (1.0 - t) * a.translation + t * b.translation)


def chordal_vec(p: Pose) -> np.ndarray:
    """Row-major rotation entries followed by the translation, length N^2 + N."""
    return np.concatenate([p.rotation.reshape(-1), p.translation])


def retract(p: VariableValue, delta) -> VariableValue:
    delta = np.asarray(delta, dtype=float).reshape(-1)
    if isinstance(p, Pose):
        if delta.size != p.tangent_dim:
            raise DimensionMismatch(f"delta of size {delta.size} for SE({p.dim})")
        return compose(p, exp_map(delta, p.dim))
    p = np.asarray(p, dtype=float)
    if delta.size != p.size:
        raise DimensionMismatch(f"delta of size {delta.size} for R^{p.size}")
    return p + delta


def local_coordinates(p: VariableValue, q: VariableValue) -> np.ndarray:
    """Inverse of ``retract``: the delta with ``retract(p, delta) == q``."""
    if isinstance(p, Pose):
        return log_map(between(p, q))
    return np.asarray(q, dtype=float) - np.asarray(p, dtype=float)


def random_pose(rng: np.random.Generator, dim: int = 3, max_angle: float = np.pi - 0.1,
                scale: float = 5.0) -> Pose:
    """Random pose with rotation angle below ``max_angle``."""
    if dim == 2:
        return Pose.from_xytheta(*rng.uniform(-scale, scale, 2), rng.uniform(-max_angle, max_angle))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phi = axis * rng.uniform(0.0, max_angle)
    return Pose(so3_exp(phi[None])[0], rng.uniform(-scale, scale, 3))
