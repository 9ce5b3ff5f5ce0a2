"""Robust recovery of the INS-to-camera extrinsic from optimized camera poses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .camera import NoConvergence
from .geometry import (
    Pose,
    Rotation,
    quat_conjugate,
    quat_multiply,
    quat_to_matrix,
    se3_exp,
    se3_log,
    se3_log_batch,
    se3_right_jacobian_inv,
)
from .graph import RobustKernel, huber_rho, huber_weight


class InsufficientFrames(ValueError):
    pass


@dataclass
class ExtrinsicEstimate:
    T_opt: Pose
    residual_norms: np.ndarray  # per frame, unscaled ||Delta_t||
    inliers: int
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool = True

    def report(self) -> dict:
        return {
            "final_cost": float(self.final_cost),
            "initial_cost": float(self.initial_cost),
            "inliers": int(self.inliers),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


def relative_discrepancy(C_star: Pose, P_ins: Pose, T: Pose) -> np.ndarray:
    """``Log[(C*)^-1 P_ins T]`` as a twist ``[rot; trans]``."""
    Cinv_R = C_star.R.T
    R = Cinv_R @ P_ins.R @ T.R
    p = Cinv_R @ (P_ins.R @ T.translation + P_ins.translation - C_star.translation)
    return se3_log(Pose.from_rt(R, p))


def _discrepancies(cq, cp, iq, ip, T: Pose):
    """Batched Delta_t for all frames; inputs are quaternion/position arrays."""
    ciq = quat_conjugate(cq)
    q = quat_multiply(ciq, quat_multiply(iq, np.broadcast_to(T.rotation.q, iq.shape)))
    CiR = quat_to_matrix(ciq)
    IR = quat_to_matrix(iq)
    p = np.einsum("fij,fj->fi", CiR, np.einsum("fij,j->fi", IR, T.translation) + ip - cp)
    return se3_log_batch(q, p)


@dataclass(frozen=True)
class ExtrinsicOptions:
    max_iterations: int = 100
    step_tol: float = 1e-10
    # pre-scaling of [rot; trans] before the norm; (1, 1) reproduces the plain norm
    rot_scale: float = 1.0
    trans_scale: float = 1.0


def _cost(delta, scale, kernel):
    s = np.sum((delta * scale) ** 2, axis=1)
    return float(np.sum(huber_rho(s, kernel.delta))), s


def refine_extrinsics(cam_poses: Sequence[Pose], ins_poses: Sequence[Pose], T_init: Pose,
                      kernel: RobustKernel = RobustKernel(delta=0.5),
                      opts: ExtrinsicOptions = ExtrinsicOptions()) -> ExtrinsicEstimate:
    """IRLS Gauss-Newton on the right tangent of ``T`` minimizing sum rho(|Delta_t(T)|^2).

    A :class:`NoConvergence` is raised only if the iteration cap is hit; its
    ``best`` attribute carries the best-so-far estimate.
    """
    if len(cam_poses) != len(ins_poses):
        raise ValueError("camera and INS pose lists must be aligned")
    if len(cam_poses) < 3:
        raise InsufficientFrames("need at least 3 frame pairs, got %d" % len(cam_poses))
    cq = np.array([P.rotation.q for P in cam_poses])
    cp = np.array([P.translation for P in cam_poses])
    iq = np.array([P.rotation.q for P in ins_poses])
    ip = np.array([P.translation for P in ins_poses])
    scale = np.array([opts.rot_scale] * 3 + [opts.trans_scale] * 3)

    T = T_init
    delta = _discrepancies(cq, cp, iq, ip, T)
    cost0, s = _cost(delta, scale, kernel)
    cost = cost0
    converged = False
    it = 0
    for it in range(1, opts.max_iterations + 1):
        w = huber_weight(s, kernel.delta)
        # d Delta / d xi = Jr^-1(Delta): the product P T exp(xi) perturbs Delta on the right
        J = se3_right_jacobian_inv(delta) * scale[None, :, None]
        r = delta * scale
        H = np.einsum("f,fki,fkj->ij", w, J, J)
        g = np.einsum("f,fki,fk->i", w, J, r)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, g, rcond=None)[0]
        # backtracking keeps the robust cost non-increasing
        alpha = 1.0
        while True:
            T_new = T @ se3_exp(alpha * step)
            d_new = _discrepancies(cq, cp, iq, ip, T_new)
            c_new, s_new = _cost(d_new, scale, kernel)
            if c_new <= cost or alpha < 1e-6:
                break
            alpha *= 0.5
        if c_new <= cost:
            T, delta, cost, s = T_new, d_new, c_new, s_new
        if np.linalg.norm(alpha * step) < opts.step_tol or c_new > cost:
            converged = True
            break
    norms = np.linalg.norm(delta, axis=1)
    inliers = int(np.sum(s <= kernel.delta**2))
    est = ExtrinsicEstimate(T, norms, inliers, it, cost0, cost, converged)
    if not converged:
        exc = NoConvergence("extrinsic adjustment hit %d iterations" % opts.max_iterations)
        exc.best = est
        raise exc
    return est
