"""Calibration quality metrics and the frame-wise visual-localization benchmark."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .camera import Z_MIN, BehindCamera, Intrinsics, NoConvergence, undistort
from .geometry import Pose, compose, inverse, quat_exp, quat_multiply, relative_angle, se3_exp

DEFAULT_THRESHOLDS = ((2.0, 2.0), (5.0, 5.0), (10.0, 10.0))


class EmptyInput(ValueError):
    pass


class Degenerate(ValueError):
    pass


def median_mad(e):
    """Median and median absolute deviation of ``e`` (exact, sort based)."""
    e = np.asarray(e, dtype=float).ravel()
    if e.size == 0:
        raise EmptyInput("no values")
    med = float(np.median(e))
    return med, float(np.median(np.abs(e - med)))


# ---------------------------------------------------------------------------
# reprojection of anchor priors
# ---------------------------------------------------------------------------


@dataclass
class ReprojReport:
    errors: np.ndarray
    median: float
    mad: float
    count: int
    behind: int = 0

    def as_dict(self) -> dict:
        return {"median": self.median, "mad": self.mad, "count": self.count, "behind": self.behind}


def calibration_poses(ins, T: Pose) -> dict:
    """Camera poses implied by INS poses and an extrinsic: ``{t: P_ins,t * T}``."""
    return {int(m.t): compose(m.pose, T) for m in ins}


def evaluate_reprojection(anchors, poses: dict, K: Intrinsics) -> ReprojReport:
    """Pixel distance between each observation and the projection of its anchor's world prior."""
    frames, X, uv = [], [], []
    for a in anchors:
        for t, px in zip(a.frames, a.pixels):
            frames.append(int(t))
            X.append(a.world_prior)
            uv.append(px)
    if not frames:
        raise EmptyInput("no anchor observations")
    missing = sorted(set(frames) - set(poses))
    if missing:
        raise KeyError("no pose for frame %d" % missing[0])
    ts = np.array(sorted(set(frames)))
    pos = {t: i for i, t in enumerate(ts)}
    fidx = np.array([pos[t] for t in frames], dtype=np.int64)
    R = np.array([poses[t].R for t in ts])
    p = np.array([poses[t].translation for t in ts])
    X = np.asarray(X, dtype=float)
    out = kernels.reprojection_blocks(K.as_vector(), R, p, X, fidx, np.arange(len(X)),
                                      np.asarray(uv, dtype=float), Z_MIN)
    err = np.linalg.norm(out.res[out.valid], axis=1)
    if err.size == 0:
        raise EmptyInput("every observation is behind its camera")
    med, mad = median_mad(err)
    return ReprojReport(err, med, mad, int(err.size), int(np.sum(~out.valid)))


# ---------------------------------------------------------------------------
# PnP
# ---------------------------------------------------------------------------


def _normalized(uv, K: Intrinsics):
    d = np.column_stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy])
    return undistort(d, K)


def _hartley(pts):
    c = pts.mean(axis=0)
    s = math.sqrt(pts.shape[1]) / max(np.mean(np.linalg.norm(pts - c, axis=1)), 1e-12)
    return c, s


def _nearest_rotation(M):
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def _dlt(X, n):
    """Camera-from-world (R, t) from the 3x4 DLT on normalized image points."""
    cX, sX = _hartley(X)
    Xn = (X - cX) * sX
    N = len(X)
    A = np.zeros((2 * N, 12))
    Xh = np.column_stack([Xn, np.ones(N)])
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -n[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -n[:, 1:2] * Xh
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-10 * s[0]:
        raise Degenerate("DLT system is rank deficient")
    P = Vt[-1].reshape(3, 4)
    # undo the point normalization: x ~ P [sX (X - cX); 1]
    M = P[:, :3] * sX
    m = P[:, 3] - M @ cX
    if np.linalg.det(M) < 0:
        M, m = -M, -m
    scale = np.mean(np.linalg.svd(M, compute_uv=False))
    return _nearest_rotation(M), m / scale


def _homography_init(X, n):
    """Camera-from-world (R, t) for (nearly) coplanar points via a plane homography."""
    c = X.mean(axis=0)
    _, _, Vt = np.linalg.svd(X - c)
    E = Vt.T  # columns: in-plane axes, then the normal
    ab = (X - c) @ E[:, :2]
    ca, sa = _hartley(ab)
    cn, sn = _hartley(n)
    a = (ab - ca) * sa
    b = (n - cn) * sn
    N = len(X)
    A = np.zeros((2 * N, 9))
    ah = np.column_stack([a, np.ones(N)])
    A[0::2, 0:3] = ah
    A[0::2, 6:9] = -b[:, :1] * ah
    A[1::2, 3:6] = ah
    A[1::2, 6:9] = -b[:, 1:2] * ah
    _, s, Vt2 = np.linalg.svd(A)
    if s[-2] < 1e-10 * s[0]:
        raise Degenerate("homography system is rank deficient")
    Hn = Vt2[-1].reshape(3, 3)
    Ta = np.array([[sa, 0, -sa * ca[0]], [0, sa, -sa * ca[1]], [0, 0, 1.0]])
    Tb_inv = np.array([[1 / sn, 0, cn[0]], [0, 1 / sn, cn[1]], [0, 0, 1.0]])
    H = Tb_inv @ Hn @ Ta
    lam = 2.0 / (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    H = H * lam
    if H[2, 2] < 0:  # the plane origin must lie in front of the camera
        H = -H
    r1, r2, t = H[:, 0], H[:, 1], H[:, 2]
    R_cp = _nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    R = R_cp @ E.T
    return R, t - R @ c


def _reproj(K, C: Pose, X, uv):
    out = kernels.reprojection_blocks(
        K.as_vector(), C.R[None], C.translation[None], X, np.zeros(len(X), dtype=np.int64),
        np.arange(len(X)), uv, Z_MIN,
    )
    return out


def _robust_cost(res, valid, delta):
    s = np.sum(res**2, axis=1)
    r = np.sqrt(s)
    rho = np.where(r <= delta, s, 2 * delta * r - delta * delta)
    return float(np.sum(rho[valid])) + 1e12 * float(np.sum(~valid))


def solve_pnp(X, uv, K: Intrinsics, delta: float = 2.0, max_iterations: int = 100,
              planar_ratio: float = 0.05) -> Pose:
    """World-from-camera pose from 2D-3D matches: DLT (or plane homography) then robust LM."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    if len(X) != len(uv):
        raise ValueError("point and pixel counts differ")
    if len(X) < 6:
        raise Degenerate("PnP needs at least 6 correspondences, got %d" % len(X))
    n = _normalized(uv, K)
    sv = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise Degenerate("points are collinear")
    if sv[2] < planar_ratio * sv[0]:
        R, t = _homography_init(X, n)
    else:
        R, t = _dlt(X, n)
    C = Pose.from_rt(R.T, -R.T @ t)

    out = _reproj(K, C, X, uv)
    if np.sum(out.valid) < 6:
        raise Degenerate("initial pose puts the points behind the camera")
    cost = _robust_cost(out.res, out.valid, delta)
    lam = 1e-3
    for _ in range(max_iterations):
        s = np.sum(out.res**2, axis=1)
        r = np.sqrt(s)
        w = np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300)) * out.valid
        J = out.j_pose
        H = np.einsum("m,mri,mrj->ij", w, J, J)
        g = np.einsum("m,mri,mr->i", w, J, out.res)
        while True:
            step = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            C_new = compose(C, se3_exp(step))
            out_new = _reproj(K, C_new, X, uv)
            c_new = _robust_cost(out_new.res, out_new.valid, delta)
            if c_new <= cost:
                break
            lam *= 10.0
            if lam > 1e12:
                return C
        done = (cost - c_new) <= 1e-14 * max(cost, 1e-300) or np.linalg.norm(step) < 1e-13
        C, out, cost = C_new, out_new, c_new
        lam = max(lam * 0.1, 1e-12)
        if done:
            return C
    raise NoConvergence("PnP refinement did not converge in %d iterations" % max_iterations)


# ---------------------------------------------------------------------------
# visual localization benchmark
# ---------------------------------------------------------------------------


@dataclass
class VlReport:
    frames: list
    rot_errors: np.ndarray  # degrees
    trans_errors: np.ndarray  # meters
    rot_median: float
    rot_mad: float
    trans_median: float
    trans_mad: float
    accuracy: dict  # "m/deg" -> fraction
    skipped: int = 0
    thresholds: tuple = DEFAULT_THRESHOLDS

    def as_dict(self) -> dict:
        return {
            "frames": len(self.frames),
            "skipped": self.skipped,
            "rot_median_deg": self.rot_median,
            "rot_mad_deg": self.rot_mad,
            "trans_median_m": self.trans_median,
            "trans_mad_m": self.trans_mad,
            "accuracy": dict(self.accuracy),
        }


def pose_errors(est: Pose, gt: Pose):
    """(rotation error in degrees, translation error in meters)."""
    return math.degrees(relative_angle(gt.rotation, est.rotation)), float(
        np.linalg.norm(est.translation - gt.translation)
    )


def threshold_key(m: float, deg: float) -> str:
    return "%g/%g" % (m, deg)


def summarize_vl(frames, rot, trans, skipped=0, thresholds=DEFAULT_THRESHOLDS) -> VlReport:
    rot = np.asarray(rot, dtype=float)
    trans = np.asarray(trans, dtype=float)
    total = len(rot) + skipped
    if total == 0:
        raise EmptyInput("no frames to evaluate")
    acc = {}
    for m, d in thresholds:
        ok = int(np.sum((trans <= m) & (rot <= d)))
        acc[threshold_key(m, d)] = ok / total  # joint (meters AND degrees); skipped frames fail
    if len(rot):
        rm, rd = median_mad(rot)
        tm, td = median_mad(trans)
    else:
        rm = rd = tm = td = float("nan")
    return VlReport(list(frames), rot, trans, rm, rd, tm, td, acc, skipped, tuple(thresholds))


def vl_benchmark(frames, K: Intrinsics, T: Pose, gt_poses: dict, thresholds=DEFAULT_THRESHOLDS,
                 delta: float = 2.0) -> VlReport:
    """PnP per frame, converted to INS poses with ``T`` and compared to ground truth."""
    Tinv = inverse(T)
    done, rot, trans = [], [], []
    skipped = 0
    for fr in sorted(frames, key=lambda f: f.t):
        if fr.t not in gt_poses:
            raise KeyError("no ground-truth pose for frame %d" % fr.t)
        try:
            C = solve_pnp(fr.X, fr.u, K, delta)
        except (Degenerate, NoConvergence, BehindCamera, np.linalg.LinAlgError):
            skipped += 1
            continue
        r, t = pose_errors(compose(C, Tinv), gt_poses[fr.t])
        done.append(fr.t)
        rot.append(r)
        trans.append(t)
    return summarize_vl(done, rot, trans, skipped, thresholds)
