"""SO(3)/SE(3) primitives.

Conventions used everywhere in the package:

* Rotations are stored as unit quaternions ``(w, x, y, z)`` (Hamilton product,
  active rotation).  Batched helpers work on plain ``(N, 4)`` / ``(N, 3, 3)``
  arrays.
* A :class:`Pose` maps points from its own frame into the parent (world)
  frame: ``x_world = R @ x_local + p``.
* Twists are ordered ``[rot; trans]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-4
_NEAR_PI = 1e-3


def skew(v):
    """Cross-product matrix(es) of ``v`` with shape (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------------------
# batched quaternion / matrix kernels
# ---------------------------------------------------------------------------


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return q


def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.array(q, dtype=float)
    q[..., 1:] *= -1.0
    return q


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R):
    """Shepperd's method, batched. Output has ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    tr = np.trace(R, axis1=1, axis2=2)
    diag = np.stack([tr, R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    choice = np.argmax(diag, axis=1)
    q = np.empty((R.shape[0], 4))
    for k in range(4):
        m = choice == k
        if not np.any(m):
            continue
        Rm = R[m]
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr[m])
            q[m, 0] = 0.25 * s
            q[m, 1] = (Rm[:, 2, 1] - Rm[:, 1, 2]) / s
            q[m, 2] = (Rm[:, 0, 2] - Rm[:, 2, 0]) / s
            q[m, 3] = (Rm[:, 1, 0] - Rm[:, 0, 1]) / s
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + Rm[:, 0, 0] - Rm[:, 1, 1] - Rm[:, 2, 2])
            q[m, 0] = (Rm[:, 2, 1] - Rm[:, 1, 2]) / s
            q[m, 1] = 0.25 * s
            q[m, 2] = (Rm[:, 0, 1] + Rm[:, 1, 0]) / s
            q[m, 3] = (Rm[:, 0, 2] + Rm[:, 2, 0]) / s
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 + Rm[:, 1, 1] - Rm[:, 0, 0] - Rm[:, 2, 2])
            q[m, 0] = (Rm[:, 0, 2] - Rm[:, 2, 0]) / s
            q[m, 1] = (Rm[:, 0, 1] + Rm[:, 1, 0]) / s
            q[m, 2] = 0.25 * s
            q[m, 3] = (Rm[:, 1, 2] + Rm[:, 2, 1]) / s
        else:
            s = 2.0 * np.sqrt(1.0 + Rm[:, 2, 2] - Rm[:, 0, 0] - Rm[:, 1, 1])
            q[m, 0] = (Rm[:, 1, 0] - Rm[:, 0, 1]) / s
            q[m, 1] = (Rm[:, 0, 2] + Rm[:, 2, 0]) / s
            q[m, 2] = (Rm[:, 1, 2] + Rm[:, 2, 1]) / s
            q[m, 3] = 0.25 * s
    q = quat_normalize(q)
    q[q[:, 0] < 0] *= -1.0
    return q.reshape(batch + (4,))


def quat_exp(omega):
    """Axis-angle vector(s) -> unit quaternion(s)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta, Taylor expanded near zero
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * omega], axis=-1)


def quat_log(q):
    """Unit quaternion(s) -> axis-angle vector(s) with norm in [0, pi]."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    w = q[..., 0:1]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(n, w)
    small = n < 1e-8
    safe = np.where(small, 1.0, n)
    # theta / sin(theta/2) -> 2/w (1 + n^2/(3 w^2)) near zero
    k = np.where(small, 2.0 / w * (1.0 - n**2 / (3.0 * w**2)), theta / safe)
    return k * v


def so3_exp_matrix(omega):
    """Rodrigues formula, batched over (..., 3)."""
    omega = np.asarray(omega, dtype=float)
    theta2 = np.sum(omega * omega, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / (safe * safe))
    W = skew(omega)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log_matrix(R):
    """Rotation matrix(es) -> axis-angle, batched.

    Angle from ``atan2(|vee(R - R^T)|/2, (tr R - 1)/2)``.  The axis comes from
    the antisymmetric part away from pi and from the largest row of
    ``(R + I)/2`` near pi (sign disambiguated by the antisymmetric part).
    """
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    vee = 0.5 * np.stack(
        [R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]],
        axis=1,
    )
    s = np.linalg.norm(vee, axis=1)
    c = 0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0)
    theta = np.arctan2(s, c)
    out = np.empty_like(vee)

    small = theta < _SMALL_ANGLE
    near_pi = theta > np.pi - _NEAR_PI
    regular = ~(small | near_pi)

    # theta/sin(theta) ~ 1 + theta^2/6
    out[small] = vee[small] * (1.0 + theta[small, None] ** 2 / 6.0)
    out[regular] = vee[regular] * (theta[regular] / s[regular])[:, None]
    if np.any(near_pi):
        B = 0.5 * (R[near_pi] + np.eye(3))
        # B ~ cos^2-weighted a a^T, pick its largest diagonal row
        rows = np.argmax(np.stack([B[:, 0, 0], B[:, 1, 1], B[:, 2, 2]], axis=1), axis=1)
        idx = np.arange(B.shape[0])
        axis = B[idx, rows, :]
        axis /= np.linalg.norm(axis, axis=1, keepdims=True)
        sign = np.sign(np.sum(axis * vee[near_pi], axis=1))
        sign[sign == 0] = 1.0
        out[near_pi] = axis * (sign * theta[near_pi])[:, None]
    return out.reshape(batch + (3,))


def so3_right_jacobian(phi):
    """Right Jacobian of SO(3): Exp(phi + d) ~ Exp(phi) Exp(Jr d)."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta < 1e-3
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / (safe * safe))
    b = np.where(
        small, 1.0 / 6.0 - theta2 / 120.0, (theta - np.sin(theta)) / (safe * safe * safe)
    )
    W = skew(phi)
    return np.eye(3) - a * W + b * (W @ W)


def so3_right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta < 1e-3
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        1.0 / (safe * safe) - (1.0 + np.cos(theta)) / (2.0 * safe * np.sin(safe)),
    )
    W = skew(phi)
    return np.eye(3) + 0.5 * W + c * (W @ W)


def _se3_q_matrix(phi, rho):
    """Coupling block of the SE(3) left Jacobian (Barfoot's Q), batched."""
    theta2 = np.sum(phi * phi, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta < 3e-2
    safe = np.where(small, 1.0, theta)
    st, ct = np.sin(safe), np.cos(safe)
    c1 = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (safe - st) / safe**3)
    c2 = np.where(
        small,
        1.0 / 24.0 - theta2 / 720.0,
        (safe**2 + 2.0 * ct - 2.0) / (2.0 * safe**4),
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - theta2 / 2520.0,
        (2.0 * safe - 3.0 * st + safe * ct) / (2.0 * safe**5),
    )
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    return (
        0.5 * Rh
        + c1 * (PR + RP + PRP)
        + c2 * (P @ PR + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian(xi):
    """Left Jacobian of SE(3) for twists ordered ``[rot; trans]``."""
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    Jl = so3_right_jacobian(-phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jl
    out[..., 3:, 3:] = Jl
    out[..., 3:, :3] = _se3_q_matrix(phi, rho)
    return out


def se3_right_jacobian(xi):
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi):
    J = se3_right_jacobian(xi)
    A_inv = np.linalg.inv(J[..., :3, :3])
    out = np.zeros_like(J)
    out[..., :3, :3] = A_inv
    out[..., 3:, 3:] = A_inv
    out[..., 3:, :3] = -A_inv @ J[..., 3:, :3] @ A_inv
    return out


def _v_matrix(omega):
    omega = np.asarray(omega, dtype=float)
    theta2 = np.sum(omega * omega, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (theta - np.sin(theta)) / safe**3)
    W = skew(omega)
    return np.eye(3) + b * W + c * (W @ W)


def _v_matrix_inv(omega):
    omega = np.asarray(omega, dtype=float)
    theta2 = np.sum(omega * omega, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta < 1e-3
    safe = np.where(small, 1.0, theta)
    half = 0.5 * safe
    c = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        (1.0 - half * np.cos(half) / np.sin(half)) / (safe * safe),
    )
    W = skew(omega)
    return np.eye(3) - 0.5 * W + c * (W @ W)


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class Rotation:
    """Immutable unit-quaternion rotation."""

    __slots__ = ("_q",)

    def __init__(self, q=(1.0, 0.0, 0.0, 0.0)):
        q = np.asarray(q, dtype=float).reshape(4)
        if not np.all(np.isfinite(q)):
            raise ValueError("quaternion must be finite")
        self._q = _frozen(q / np.linalg.norm(q))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls()

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        return cls(matrix_to_quat(np.asarray(R, dtype=float)))

    @property
    def q(self) -> np.ndarray:
        return self._q

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self._q)

    def inverse(self) -> "Rotation":
        return Rotation(quat_conjugate(self._q))

    def __mul__(self, other: "Rotation") -> "Rotation":
        # constructor renormalizes, keeping long composition chains on the manifold
        return Rotation(quat_multiply(self._q, other._q))

    def apply(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.as_matrix().T

    def angle(self) -> float:
        return float(np.linalg.norm(quat_log(self._q)))

    def __repr__(self) -> str:
        return "Rotation(q=%s)" % np.array2string(self._q, precision=6)


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping local-frame points into the parent frame."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation(), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(Rotation.from_matrix(R), t)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    @property
    def p(self) -> np.ndarray:
        return self.translation

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def to_json(self) -> dict:
        q = np.array(self.rotation.q)
        if q[0] < 0:
            q = -q
        return {"q": [float(v) for v in q], "p": [float(v) for v in self.translation]}

    @classmethod
    def from_json(cls, obj: dict) -> "Pose":
        return cls(Rotation(obj["q"]), obj["p"])


def so3_exp(omega) -> Rotation:
    omega = np.asarray(omega, dtype=float).reshape(3)
    if not np.all(np.isfinite(omega)):
        raise ValueError("rotation vector must be finite")
    return Rotation(quat_exp(omega))


def so3_log(R) -> np.ndarray:
    """Axis-angle of a :class:`Rotation` or a 3x3 matrix; norm in [0, pi]."""
    if isinstance(R, Rotation):
        return quat_log(R.q)
    return so3_log_matrix(np.asarray(R, dtype=float))


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    return Pose(so3_exp(omega), _v_matrix(omega) @ v)


def se3_log(T: Pose) -> np.ndarray:
    omega = quat_log(T.rotation.q)
    return np.concatenate([omega, _v_matrix_inv(omega) @ T.translation])


def compose(A: Pose, B: Pose) -> Pose:
    return Pose(A.rotation * B.rotation, A.R @ B.translation + A.translation)


def inverse(P: Pose) -> Pose:
    Rinv = P.rotation.inverse()
    return Pose(Rinv, -(Rinv.as_matrix() @ P.translation))


def transform_point(P: Pose, x) -> np.ndarray:
    return np.asarray(x, dtype=float) @ P.R.T + P.translation


def relative_angle(A: Rotation, B: Rotation) -> float:
    """Angle (radians) of ``A^-1 B``."""
    return (A.inverse() * B).angle()


# batched SE(3) helpers used by the solver and simulator


def se3_exp_batch(xi):
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[..., :3], xi[..., 3:]
    q = quat_exp(omega)
    t = np.einsum("...ij,...j->...i", _v_matrix(omega), v)
    return q, t


def se3_log_batch(q, t):
    omega = quat_log(q)
    return np.concatenate(
        [omega, np.einsum("...ij,...j->...i", _v_matrix_inv(omega), t)], axis=-1
    )
