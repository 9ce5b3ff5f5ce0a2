"""Pinhole camera with radial-tangential (k1, k2, p1, p2) distortion.

Camera frame: +z along the optical axis, +x right, +y down.  Pixel origin at
the top-left corner, ``u`` to the right and ``v`` down.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import Pose

Z_MIN = 1e-3

PARAM_NAMES = ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2")


class BehindCamera(ValueError):
    """Point lies at or behind the camera's minimum depth."""


class NoConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class SanityBounds:
    max_radial: float = 2.0
    max_tangential: float = 0.1


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 1600
    height: int = 1100

    def validate(self, bounds: SanityBounds = SanityBounds()) -> None:
        problems = []
        if not (self.fx > 0 and self.fy > 0):
            problems.append("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            problems.append("principal point outside the image")
        if max(abs(self.k1), abs(self.k2)) >= bounds.max_radial:
            problems.append("radial coefficient out of bounds")
        if max(abs(self.p1), abs(self.p2)) >= bounds.max_tangential:
            problems.append("tangential coefficient out of bounds")
        if problems:
            raise ValueError("; ".join(problems))

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_vector(cls, vec, width: int = 1600, height: int = 1100) -> "Intrinsics":
        vals = [float(v) for v in np.asarray(vec, dtype=float).reshape(8)]
        return cls(*vals, width=int(width), height=int(height))

    def with_vector(self, vec) -> "Intrinsics":
        return Intrinsics.from_vector(vec, self.width, self.height)

    @property
    def dist(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.p1, self.p2])

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "dist": [self.k1, self.k2, self.p1, self.p2],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Intrinsics":
        missing = {"fx", "fy", "cx", "cy", "dist", "width", "height"} - set(obj)
        if missing:
            raise KeyError("intrinsics missing keys: %s" % sorted(missing))
        dist = list(obj["dist"])
        if len(dist) != 4:
            raise ValueError("dist must hold [k1, k2, p1, p2]")
        return cls(
            float(obj["fx"]),
            float(obj["fy"]),
            float(obj["cx"]),
            float(obj["cy"]),
            *[float(d) for d in dist],
            width=int(obj["width"]),
            height=int(obj["height"]),
        )

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Intrinsics":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def distort(n, K: Intrinsics) -> np.ndarray:
    """Apply radial-tangential distortion to normalized coordinates (..., 2)."""
    n = np.asarray(n, dtype=float)
    x, y = n[..., 0], n[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + K.k1 * r2 + K.k2 * r2 * r2
    xd = x * radial + 2.0 * K.p1 * x * y + K.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + K.p1 * (r2 + 2.0 * y * y) + 2.0 * K.p2 * x * y
    return np.stack([xd, yd], axis=-1)


def _distort_jacobian(x, y, K: Intrinsics):
    r2 = x * x + y * y
    radial = 1.0 + K.k1 * r2 + K.k2 * r2 * r2
    dr = K.k1 + 2.0 * K.k2 * r2
    a = radial + 2.0 * x * x * dr + 2.0 * K.p1 * y + 6.0 * K.p2 * x
    b = 2.0 * x * y * dr + 2.0 * K.p1 * x + 2.0 * K.p2 * y
    d = radial + 2.0 * y * y * dr + 6.0 * K.p1 * y + 2.0 * K.p2 * x
    return a, b, d


def undistort(d, K: Intrinsics, max_iter: int = 20, tol: float = 1e-8) -> np.ndarray:
    """Invert :func:`distort` by Newton iteration, batched over (..., 2)."""
    d = np.asarray(d, dtype=float)
    n = d.copy()
    for _ in range(max_iter):
        err = distort(n, K) - d
        if np.max(np.abs(err), initial=0.0) < 1e-15:
            break
        a, b, c = _distort_jacobian(n[..., 0], n[..., 1], K)
        det = a * c - b * b
        n = n - np.stack(
            [(c * err[..., 0] - b * err[..., 1]) / det, (a * err[..., 1] - b * err[..., 0]) / det],
            axis=-1,
        )
    resid = np.max(np.abs(distort(n, K) - d), initial=0.0)
    if not np.isfinite(resid) or resid > tol:
        raise NoConvergence("undistort residual %.3g after %d iterations" % (resid, max_iter))
    # a root where the lens folds back (radial factor or Jacobian not positive) is spurious
    r2 = n[..., 0] ** 2 + n[..., 1] ** 2
    a, b, c = _distort_jacobian(n[..., 0], n[..., 1], K)
    if np.any(1.0 + K.k1 * r2 + K.k2 * r2 * r2 <= 0) or np.any(a * c - b * b <= 0):
        raise NoConvergence("undistort left the invertible region of the distortion map")
    return n


def _camera_arrays(C: Pose):
    return C.R[None], np.asarray(C.translation)[None]


def project(K: Intrinsics, C: Pose, X, z_min: float = Z_MIN) -> np.ndarray:
    """Project world point ``X`` through a camera with world pose ``C``."""
    X = np.asarray(X, dtype=float).reshape(3)
    Xc = C.R.T @ (X - C.translation)
    if not Xc[2] > z_min:
        raise BehindCamera("camera-frame depth %.6g <= %.3g" % (Xc[2], z_min))
    d = distort(Xc[:2] / Xc[2], K)
    return np.array([K.fx * d[0] + K.cx, K.fy * d[1] + K.cy])


def project_points(K: Intrinsics, C: Pose, X, z_min: float = Z_MIN):
    """Batched projection; returns ``(pixels (N, 2), valid (N,))``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xc = (X - C.translation) @ C.R
    valid = Xc[:, 2] > z_min
    z = np.where(valid, Xc[:, 2], 1.0)
    d = distort(Xc[:, :2] / z[:, None], K)
    uv = np.empty_like(d)
    uv[:, 0] = K.fx * d[:, 0] + K.cx
    uv[:, 1] = K.fy * d[:, 1] + K.cy
    return uv, valid


def backproject(K: Intrinsics, C: Pose, uv, depth) -> np.ndarray:
    """Pixel plus camera-frame depth -> world point (inverse of :func:`project`)."""
    uv = np.asarray(uv, dtype=float)
    d = np.array([(uv[..., 0] - K.cx) / K.fx, (uv[..., 1] - K.cy) / K.fy]).T
    n = undistort(d, K)
    depth = np.asarray(depth, dtype=float)
    Xc = np.concatenate([n * depth[..., None], depth[..., None]], axis=-1)
    return Xc @ C.R.T + C.translation


def project_jacobians(K: Intrinsics, C: Pose, X, z_min: float = Z_MIN):
    """Analytic Jacobians of the projection.

    Returns ``(d_pose (2, 6), d_point (2, 3), d_intrinsics (2, 8))``.  The pose
    derivative is taken w.r.t. a right-multiplicative twist ``C * exp(xi)`` with
    ``xi = [rot; trans]``.
    """
    X = np.asarray(X, dtype=float).reshape(1, 3)
    R, p = _camera_arrays(C)
    out = kernels.reprojection_blocks(
        K.as_vector(),
        R,
        p,
        X,
        np.zeros(1, dtype=np.int64),
        np.zeros(1, dtype=np.int64),
        np.zeros((1, 2)),
        z_min,
    )
    if not out.valid[0]:
        raise BehindCamera("point behind camera")
    # kernel returns Jacobians of (observed - predicted)
    return -out.j_pose[0], -out.j_point[0], -out.j_intr[0]
