"""Calibration factor graph: pose priors, anchor priors and reprojection factors.

Variables are camera poses ``C_t`` (world-from-camera), landmark positions
``X_j`` and the intrinsics vector ``K``.  All factors are whitened by their
standard deviations and wrapped in a Huber kernel applied to the squared norm
of the whitened residual.  Optimization is Levenberg-Marquardt with a
Marquardt-scaled damping term; landmarks are eliminated by a Schur complement
whenever they are optimized together with poses or intrinsics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from . import kernels
from .camera import Z_MIN, Intrinsics
from .geometry import (
    Pose,
    Rotation,
    compose,
    quat_conjugate,
    quat_exp,
    quat_log,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    so3_log,
    so3_right_jacobian_inv,
    _v_matrix,
)

log = logging.getLogger(__name__)


# banded Cholesky for the reduced pose system; sparse LU is used when False
USE_BANDED = True


class SingularSystem(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class NoActiveVariables(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage_index, stage, cause, reports=()):
        super().__init__("stage %d (%s) failed: %s" % (stage_index, stage, cause))
        self.stage_index = stage_index
        self.stage = stage
        self.cause = cause
        self.reports = list(reports)  # stages that completed before the failure


# ---------------------------------------------------------------------------
# measurement types and residuals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InsPoseMeasurement:
    t: int
    pose: Pose
    sigma_rot: float  # rad
    sigma_pos: float  # m

    def __post_init__(self):
        if not (self.sigma_rot > 0 and self.sigma_pos > 0):
            raise ValueError("INS sigmas must be positive")


@dataclass(frozen=True)
class PriorBudget:
    sigma_rot_calib: float = math.radians(1.0)
    sigma_pos_calib: float = 0.5
    sigma_rot_lump: float = math.radians(0.2)
    sigma_pos_lump: float = 0.1

    def __post_init__(self):
        if min(self.sigma_rot_calib, self.sigma_pos_calib, self.sigma_rot_lump,
               self.sigma_pos_lump) < 0:
            raise ValueError("prior budget terms must be non-negative")


@dataclass(frozen=True)
class RobustKernel:
    delta: float = 1.345
    kind: str = "huber"

    def __post_init__(self):
        if self.kind != "huber":
            raise ValueError("only the Huber kernel is implemented")
        if not self.delta > 0:
            raise ValueError("kernel delta must be positive")

    def rho(self, s):
        return huber_rho(s, self.delta)

    def weight(self, s):
        return huber_weight(s, self.delta)


def huber_rho(s, delta):
    """Huber loss of a squared norm ``s``: ``s`` below ``delta**2``, linear in sqrt(s) above."""
    s = np.asarray(s, dtype=float)
    r = np.sqrt(s)
    return np.where(r <= delta, s, 2.0 * delta * r - delta * delta)


def huber_weight(s, delta):
    """d rho / d s."""
    s = np.asarray(s, dtype=float)
    r = np.sqrt(s)
    return np.where(r <= delta, 1.0, delta / np.where(r > 0, r, 1.0))


def camera_pose_prior(m: InsPoseMeasurement, T_init: Pose, budget: PriorBudget = PriorBudget()):
    """Camera pose prior ``P_ins * T_init`` and its per-axis sigmas ``[rot x3, pos x3]``."""
    sr = math.sqrt(m.sigma_rot**2 + budget.sigma_rot_calib**2 + budget.sigma_rot_lump**2)
    sp_ = math.sqrt(m.sigma_pos**2 + budget.sigma_pos_calib**2 + budget.sigma_pos_lump**2)
    return compose(m.pose, T_init), np.array([sr, sr, sr, sp_, sp_, sp_])


def pose_prior_residual(P_hat: Pose, C: Pose) -> np.ndarray:
    r_rot = so3_log(P_hat.rotation * C.rotation.inverse())
    return np.concatenate([r_rot, P_hat.translation - C.translation])


def anchor_prior_residual(X_hat, X) -> np.ndarray:
    return np.asarray(X_hat, dtype=float) - np.asarray(X, dtype=float)


def reprojection_residual(K: Intrinsics, C: Pose, X, u, z_min: float = Z_MIN) -> np.ndarray:
    from .camera import project

    return np.asarray(u, dtype=float) - project(K, C, X, z_min)


# ---------------------------------------------------------------------------
# graph containers
# ---------------------------------------------------------------------------


@dataclass
class GraphState:
    frames: np.ndarray  # (F,) frame ids
    quats: np.ndarray  # (F, 4) world-from-camera rotations
    trans: np.ndarray  # (F, 3)
    landmark_ids: np.ndarray  # (L,)
    points: np.ndarray  # (L, 3)
    intrinsics: np.ndarray  # (8,)
    width: int = 1600
    height: int = 1100

    def copy(self) -> "GraphState":
        return GraphState(
            self.frames.copy(), self.quats.copy(), self.trans.copy(), self.landmark_ids.copy(),
            self.points.copy(), self.intrinsics.copy(), self.width, self.height,
        )

    @property
    def K(self) -> Intrinsics:
        return Intrinsics.from_vector(self.intrinsics, self.width, self.height)

    def pose(self, i: int) -> Pose:
        return Pose(Rotation(self.quats[i]), self.trans[i])

    def poses(self):
        return [self.pose(i) for i in range(len(self.frames))]

    def rotations(self) -> np.ndarray:
        return quat_to_matrix(self.quats)


@dataclass
class Factors:
    prior_quats: np.ndarray  # (F, 4)
    prior_trans: np.ndarray  # (F, 3)
    prior_sigma_rot: np.ndarray  # (F,)
    prior_sigma_pos: np.ndarray  # (F,)
    anchor_prior: np.ndarray  # (L, 3)
    anchor_sigma: np.ndarray  # (L, 3)
    obs_frame: np.ndarray  # (M,) index into state.frames
    obs_landmark: np.ndarray  # (M,) index into state.landmark_ids
    obs_uv: np.ndarray  # (M, 2)
    sigma_rep: float = 1.0
    pose_kernel: RobustKernel = RobustKernel()
    anchor_kernel: RobustKernel = RobustKernel()
    rep_kernel: RobustKernel = RobustKernel()
    z_min: float = Z_MIN
    _pairs: tuple | None = field(default=None, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.prior_quats)

    @property
    def n_landmarks(self) -> int:
        return len(self.anchor_prior)

    def pair_structure(self):
        """Observation pairs sharing a landmark, grouped by (frame_a <= frame_b) block."""
        if self._pairs is None:
            self._pairs = _build_pairs(self.obs_frame, self.obs_landmark, self.n_frames)
        return self._pairs


def _build_pairs(fidx, lidx, n_frames):
    order = np.lexsort((fidx, lidx))
    ls = lidx[order]
    fs = fidx[order]
    M = len(order)
    starts = np.flatnonzero(np.r_[True, ls[1:] != ls[:-1]])
    lengths = np.diff(np.r_[starts, M])
    max_len = int(lengths.max()) if M else 0
    pa, pb = [], []
    for d in range(max_len):
        i = np.arange(M - d)
        same = ls[i] == ls[i + d]
        i = i[same]
        pa.append(order[i])
        pb.append(order[i + d])
    pa = np.concatenate(pa) if pa else np.zeros(0, dtype=np.int64)
    pb = np.concatenate(pb) if pb else np.zeros(0, dtype=np.int64)
    fa, fb = fidx[pa], fidx[pb]
    swap = fa > fb
    pa[swap], pb[swap] = pb[swap].copy(), pa[swap].copy()
    fa, fb = fidx[pa], fidx[pb]
    key = fa.astype(np.int64) * n_frames + fb
    korder = np.argsort(key, kind="stable")
    pa, pb, key = pa[korder], pb[korder], key[korder]
    ukeys, bid = np.unique(key, return_inverse=True)
    return (
        pa.astype(np.int64),
        pb.astype(np.int64),
        bid.astype(np.int64),
        (ukeys // n_frames).astype(np.int64),
        (ukeys % n_frames).astype(np.int64),
    )


@dataclass(frozen=True)
class Mask:
    """Active (optimized) sub-blocks; everything else stays bit-identical."""

    pose_rot: bool = False
    pose_trans: bool = False
    landmark_xy: bool = False
    landmark_z: bool = False
    intrinsics: tuple = (False,) * 8

    @classmethod
    def all(cls) -> "Mask":
        return cls(True, True, True, True, (True,) * 8)

    @property
    def any_pose(self) -> bool:
        return self.pose_rot or self.pose_trans

    @property
    def any_landmark(self) -> bool:
        return self.landmark_xy or self.landmark_z

    @property
    def any_intrinsics(self) -> bool:
        return any(self.intrinsics)

    def pose_vector(self):
        return np.array([self.pose_rot] * 3 + [self.pose_trans] * 3, dtype=bool)

    def landmark_vector(self):
        return np.array([self.landmark_xy] * 2 + [self.landmark_z], dtype=bool)

    def intrinsics_vector(self):
        return np.array(self.intrinsics, dtype=bool)


STAGE_MASKS = {
    "rotations": Mask(pose_rot=True),
    "translations": Mask(pose_trans=True),
    "poses": Mask(pose_rot=True, pose_trans=True),
    "landmarks_xy": Mask(landmark_xy=True),
    "landmarks": Mask(landmark_xy=True, landmark_z=True),
    "intrinsics": Mask(intrinsics=(True,) * 8),
    "joint": Mask.all(),
}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    pose_res: np.ndarray  # (F, 6) unwhitened
    anchor_res: np.ndarray  # (L, 3)
    rep: kernels.ReprojBlocks
    pose_s: np.ndarray
    anchor_s: np.ndarray
    rep_s: np.ndarray
    cost: float


def _pose_prior_terms(state: GraphState, f: Factors):
    # r_rot = Log(q_hat * q^-1)
    qrel = quat_multiply(f.prior_quats, quat_conjugate(state.quats))
    r_rot = quat_log(qrel)
    r_pos = f.prior_trans - state.trans
    return np.concatenate([r_rot, r_pos], axis=1)


def _pose_whiten(f: Factors):
    return np.column_stack([np.repeat(f.prior_sigma_rot[:, None], 3, 1),
                            np.repeat(f.prior_sigma_pos[:, None], 3, 1)])


def evaluate(state: GraphState, f: Factors) -> Evaluation:
    pose_res = _pose_prior_terms(state, f)
    pose_s = np.sum((pose_res / _pose_whiten(f)) ** 2, axis=1)
    anchor_res = f.anchor_prior - state.points
    anchor_s = np.sum((anchor_res / f.anchor_sigma) ** 2, axis=1)
    rep = kernels.reprojection_blocks(
        state.intrinsics, state.rotations(), state.trans, state.points, f.obs_frame,
        f.obs_landmark, f.obs_uv, f.z_min,
    )
    rep_s = np.sum(rep.res**2, axis=1) / f.sigma_rep**2
    cost = (
        float(np.sum(f.pose_kernel.rho(pose_s)))
        + float(np.sum(f.anchor_kernel.rho(anchor_s)))
        + float(np.sum(f.rep_kernel.rho(rep_s[rep.valid])))
    )
    return Evaluation(pose_res, anchor_res, rep, pose_s, anchor_s, rep_s, cost)


def total_cost(state: GraphState, f: Factors) -> float:
    """Sum over factors of Huber(|whitened residual|^2)."""
    return evaluate(state, f).cost


# ---------------------------------------------------------------------------
# linearization
# ---------------------------------------------------------------------------


@dataclass
class Linearization:
    hpp: np.ndarray
    hll: np.ndarray
    hpl: np.ndarray
    hpk: np.ndarray
    hlk: np.ndarray
    hkk: np.ndarray
    gp: np.ndarray
    gl: np.ndarray
    gk: np.ndarray

    def gradient_norm(self) -> float:
        return max(
            float(np.max(np.abs(self.gp), initial=0.0)),
            float(np.max(np.abs(self.gl), initial=0.0)),
            float(np.max(np.abs(self.gk), initial=0.0)),
        )


def linearize(state: GraphState, f: Factors, mask: Mask, ev: Evaluation | None = None) -> Linearization:
    """Gauss-Newton blocks ``H = J^T W J`` and ``g = J^T W r`` with inactive coordinates zeroed.

    ``2 * g`` is the gradient of :func:`total_cost` w.r.t. the active coordinates.
    """
    ev = ev or evaluate(state, f)
    F, L = f.n_frames, f.n_landmarks
    w_rep = f.rep_kernel.weight(ev.rep_s) * ev.rep.valid / f.sigma_rep**2
    nb = kernels.accumulate_blocks(w_rep, ev.rep, f.obs_frame, f.obs_landmark, F, L)
    hpp, hll, hpl, hpk, hlk, hkk = (np.array(a) for a in nb[:6])
    gp, gl, gk = np.array(nb.gp), np.array(nb.gl), np.array(nb.gk)

    # pose priors: d r_rot / d omega = -Jr^-1(r_rot) R, d r_pos / d v = -R
    R = state.rotations()
    w_pose = f.pose_kernel.weight(ev.pose_s)
    J = np.zeros((F, 6, 6))
    J[:, :3, :3] = -so3_right_jacobian_inv(ev.pose_res[:, :3]) @ R
    J[:, 3:, 3:] = -R
    sig = _pose_whiten(f)
    Jw = J / sig[:, :, None]
    rw = ev.pose_res / sig
    hpp += w_pose[:, None, None] * np.einsum("fki,fkj->fij", Jw, Jw)
    gp += w_pose[:, None] * np.einsum("fki,fk->fi", Jw, rw)

    # anchor priors: d r / d X = -I
    w_anc = f.anchor_kernel.weight(ev.anchor_s)
    inv_var = 1.0 / f.anchor_sigma**2
    idx = np.arange(3)
    hll[:, idx, idx] += w_anc[:, None] * inv_var
    gl += -w_anc[:, None] * ev.anchor_res * inv_var

    lin = Linearization(hpp, hll, hpl, hpk, hlk, hkk, gp, gl, gk)
    _apply_mask(lin, mask)
    return lin


def _apply_mask(lin: Linearization, mask: Mask):
    mp = mask.pose_vector()
    ml = mask.landmark_vector()
    mk = mask.intrinsics_vector()
    lin.hpp *= np.outer(mp, mp)
    lin.hll *= np.outer(ml, ml)
    lin.hpl *= np.outer(mp, ml)
    lin.hpk *= np.outer(mp, mk)
    lin.hlk *= np.outer(ml, mk)
    lin.hkk *= np.outer(mk, mk)
    lin.gp *= mp
    lin.gl *= ml
    lin.gk *= mk


# ---------------------------------------------------------------------------
# damped solve
# ---------------------------------------------------------------------------


def _damp(H, active, lam, floor):
    """Marquardt damping on active diagonal entries; unit diagonal on inactive ones."""
    H = H.copy()
    n = H.shape[-1]
    idx = np.arange(n)
    d = H[..., idx, idx]
    H[..., idx, idx] = np.where(active, d + lam * np.maximum(d, floor), 1.0)
    return H


def _batched_inv(H, what, iteration):
    try:
        Hi = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("singular %s block" % what, iteration) from exc
    if not np.all(np.isfinite(Hi)):
        raise SingularSystem("non-finite %s block inverse" % what, iteration)
    return Hi


def _batched_solve(H, g, what, iteration):
    try:
        x = np.linalg.solve(H, g[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("singular %s system" % what, iteration) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("non-finite %s step" % what, iteration)
    return x


def solve_step(lin: Linearization, f: Factors, mask: Mask, lam: float, iteration: int = 0):
    """Solve ``(H + lam * D) delta = -g``; returns ``(dp (F, 6), dl (L, 3), dk (8,))``."""
    F, L = f.n_frames, f.n_landmarks
    mp = mask.pose_vector()
    ml = mask.landmark_vector()
    mk = mask.intrinsics_vector()
    scale = max(
        float(np.max(np.abs(lin.hpp), initial=0.0)),
        float(np.max(np.abs(lin.hll), initial=0.0)),
        float(np.max(np.abs(lin.hkk), initial=0.0)),
        1.0,
    )
    floor = 1e-12 * scale
    hpp = _damp(lin.hpp, mp, lam, floor)
    hll = _damp(lin.hll, ml, lam, floor)
    hkk = _damp(lin.hkk, mk, lam, floor)
    dp = np.zeros((F, 6))
    dl = np.zeros((L, 3))
    dk = np.zeros(8)

    if mask.any_landmark and not (mask.any_pose or mask.any_intrinsics):
        dl = _batched_solve(hll, -lin.gl, "landmark", iteration)
        return dp, dl * ml, dk

    if not mask.any_landmark:
        if mask.any_pose and not mask.any_intrinsics:
            dp = _batched_solve(hpp, -lin.gp, "pose", iteration)
        elif mask.any_intrinsics and not mask.any_pose:
            dk = _batched_solve(hkk, -lin.gk, "intrinsics", iteration)
        else:
            # arrowhead: eliminate the block-diagonal poses
            hpp_inv = _batched_inv(hpp, "pose", iteration)
            Y = hpp_inv @ lin.hpk  # (F, 6, 8)
            S = hkk - np.einsum("fik,fil->kl", lin.hpk, Y)
            rhs = -lin.gk + np.einsum("fik,fi->k", Y, lin.gp)
            dk = _batched_solve(S, rhs, "intrinsics", iteration)
            dp = np.einsum("fij,fj->fi", hpp_inv, -lin.gp - lin.hpk @ dk)
        return dp * mp, dl, dk * mk

    # landmarks together with poses and/or intrinsics: Schur complement on landmarks
    hll_inv = _batched_inv(hll, "landmark", iteration)
    lidx = f.obs_landmark
    fidx = f.obs_frame
    Vk = hll_inv @ lin.hlk  # (L, 3, 8)
    Vg = np.einsum("lij,lj->li", hll_inv, lin.gl)  # (L, 3)

    skk = hkk - np.einsum("nik,nil->kl", lin.hlk, Vk)
    gk_red = lin.gk - np.einsum("nik,ni->k", lin.hlk, Vg)
    if mask.any_pose:
        pa, pb, bid, bfa, bfb = f.pair_structure()
        blocks = -kernels.schur_pose_blocks(lin.hpl, hll_inv, lidx, pa, pb, bid, len(bfa))
        diag = bfa == bfb
        blocks[diag] += hpp[bfa[diag]]
        # frames observing nothing still need their (damped) diagonal block
        has_diag = np.zeros(F, dtype=bool)
        has_diag[bfa[diag]] = True
        lonely = np.flatnonzero(~has_diag)
        if len(lonely):
            blocks = np.concatenate([blocks, hpp[lonely]])
            bfa = np.concatenate([bfa, lonely])
            bfb = np.concatenate([bfb, lonely])
        # pose-intrinsics coupling
        W = np.einsum("mij,mjk->mik", lin.hpl, Vk[lidx])  # (M, 6, 8)
        spk = lin.hpk.copy()
        for i in range(6):
            for k in range(8):
                spk[:, i, k] -= np.bincount(fidx, weights=W[:, i, k], minlength=F)
        gred = np.empty((F, 6))
        hv = np.einsum("mij,mj->mi", lin.hpl, Vg[lidx])
        for i in range(6):
            gred[:, i] = lin.gp[:, i] - np.bincount(fidx, weights=hv[:, i], minlength=F)
        xp, dk = _solve_reduced(blocks, bfa, bfb, spk, skk, -gred.ravel(), -gk_red, F, iteration)
        dp = xp.reshape(F, 6) * mp
    else:
        dk = _batched_solve(skk, -gk_red, "intrinsics", iteration)
    dk = dk * mk
    # back-substitute landmarks
    t = np.einsum("mji,mj->mi", lin.hpl, dp[fidx])  # hpl^T dp
    acc = np.empty((L, 3))
    for i in range(3):
        acc[:, i] = np.bincount(lidx, weights=t[:, i], minlength=L)
    dl = np.einsum("lij,lj->li", hll_inv, -lin.gl - acc - lin.hlk @ dk)
    return dp, dl * ml, dk


def _solve_reduced(blocks, bfa, bfb, spk, skk, rhs_p, rhs_k, F, iteration):
    """Solve the pose/intrinsics system left after eliminating landmarks.

    The pose part holds 6x6 blocks ``(bfa <= bfb)``; the 8 intrinsics form an
    arrowhead border.  Time-ordered frames with short tracks give a narrow
    band, so a banded Cholesky is tried first, sparse LU otherwise.
    """
    n = 6 * F
    span = int(np.max(bfb - bfa)) if len(bfa) else 0
    u = 6 * span + 5
    ii, jj = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
    r = 6 * bfa[:, None, None] + ii
    c = 6 * bfb[:, None, None] + jj
    if USE_BANDED and u + 1 < n // 4:
        keep = r <= c
        ab = np.zeros((u + 1, n))
        ab[u + r[keep] - c[keep], c[keep]] = blocks[keep]
        try:
            cb = sla.cholesky_banded(ab, lower=False)
            X = sla.cho_solve_banded((cb, False), np.column_stack([rhs_p, spk.reshape(n, 8)]))
            y, Z = X[:, 0], X[:, 1:]
            B = spk.reshape(n, 8)
            dk = _batched_solve(skk - B.T @ Z, rhs_k - B.T @ y, "intrinsics", iteration)
            xp = y - Z @ dk
            if np.all(np.isfinite(xp)):
                return xp, dk
        except np.linalg.LinAlgError:
            log.debug("banded Cholesky failed, falling back to sparse LU")

    off = np.repeat(bfa != bfb, 36)
    r, c, v = r.ravel(), c.ravel(), blocks.ravel()
    pr = np.repeat(np.arange(n), 8)
    pc = np.tile(n + np.arange(8), n)
    kr, kc = np.meshgrid(n + np.arange(8), n + np.arange(8), indexing="ij")
    rows = np.concatenate([r, c[off], pr, pc, kr.ravel()])
    cols = np.concatenate([c, r[off], pc, pr, kc.ravel()])
    vals = np.concatenate([v, v[off], spk.ravel(), spk.ravel(), skk.ravel()])
    S = sp.csc_matrix((vals, (rows, cols)), shape=(n + 8, n + 8))
    try:
        x = spla.splu(S, permc_spec="COLAMD").solve(np.concatenate([rhs_p, rhs_k]))
    except RuntimeError as exc:
        raise SingularSystem("reduced system is singular: %s" % exc, iteration) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("non-finite reduced step", iteration)
    return x[:n], x[n:]


def retract(state: GraphState, mask: Mask, dp, dl, dk) -> GraphState:
    """Apply a step; inactive blocks are copied through untouched."""
    out = state.copy()
    if mask.pose_rot:
        q = quat_multiply(state.quats, quat_exp(dp[:, :3]))
        out.quats = quat_normalize(q)
    if mask.pose_trans:
        R = state.rotations()
        v = dp[:, 3:]
        if mask.pose_rot:
            v = np.einsum("fij,fj->fi", _v_matrix(dp[:, :3]), v)
        out.trans = state.trans + np.einsum("fij,fj->fi", R, v)
    if mask.landmark_xy:
        out.points[:, :2] = state.points[:, :2] + dl[:, :2]
    if mask.landmark_z:
        out.points[:, 2] = state.points[:, 2] + dl[:, 2]
    if mask.any_intrinsics:
        k = state.intrinsics + dk
        # projected step keeps focal lengths positive
        k[:2] = np.maximum(k[:2], 1e-3 * state.intrinsics[:2])
        mk = mask.intrinsics_vector()
        out.intrinsics = np.where(mk, k, state.intrinsics)
    return out


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 50
    tol_rel: float = 1e-8
    tol_abs: float = 1e-12
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    lambda_max: float = 1e12


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    step_norm: float = 0.0
    message: str = ""

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _check_active(state: GraphState, f: Factors, mask: Mask):
    if not (mask.any_pose or mask.any_landmark or mask.any_intrinsics):
        raise NoActiveVariables("mask leaves nothing to optimize")
    if mask.any_intrinsics and len(f.obs_frame) == 0:
        raise NoActiveVariables("intrinsics active but no reprojection factors")


def solve_lm(state: GraphState, f: Factors, mask: Mask, opts: SolverOptions = SolverOptions()):
    """Levenberg-Marquardt over the active sub-blocks of ``mask``.

    Returns ``(new_state, SolveReport)``.  Accepted cost never increases; inactive
    blocks are returned bit-identical.
    """
    _check_active(state, f, mask)
    ev = evaluate(state, f)
    cost0 = ev.cost
    cost = cost0
    lam = opts.lambda_init
    it = 0
    converged = False
    message = ""
    total_step = 0.0
    if cost <= opts.tol_abs:
        return state.copy(), SolveReport(0, cost0, cost, True, 0.0, "cost below absolute tolerance")
    lin = linearize(state, f, mask, ev)
    if lin.gradient_norm() == 0.0:
        return state.copy(), SolveReport(0, cost0, cost, True, 0.0, "zero gradient")

    while it < opts.max_iterations:
        it += 1
        dp, dl, dk = solve_step(lin, f, mask, lam, it)
        cand = retract(state, mask, dp, dl, dk)
        ev_new = evaluate(cand, f)
        if np.isfinite(ev_new.cost) and ev_new.cost < cost:
            decrease = (cost - ev_new.cost) / max(cost, 1e-300)
            state, ev, cost = cand, ev_new, ev_new.cost
            total_step = math.sqrt(total_step**2 + float(np.sum(dp**2) + np.sum(dl**2) + np.sum(dk**2)))
            lam = max(lam * opts.lambda_down, 1e-12)
            if decrease < opts.tol_rel or cost <= opts.tol_abs:
                converged = True
                message = "relative decrease below tolerance"
                break
            lin = linearize(state, f, mask, ev)
        else:
            lam *= opts.lambda_up
            if lam > opts.lambda_max:
                converged = True
                message = "no decreasing step (stationary)"
                break
    else:
        message = "iteration cap reached"
    log.debug("LM %s: %d iterations, cost %.6g -> %.6g (%s)", mask, it, cost0, cost, message)
    return state, SolveReport(it, cost0, cost, converged, total_step, message)


# ---------------------------------------------------------------------------
# staged schedule
# ---------------------------------------------------------------------------

DEFAULT_SCHEDULE = ("rotations", "translations", "landmarks_xy", "intrinsics", "joint")
ABLATIONS = ("no_nadir", "cam_opt_joint", "no_fine_adjust")


@dataclass
class StageConfig:
    schedule: Sequence[str] = DEFAULT_SCHEDULE
    max_iterations: dict = field(default_factory=dict)
    default_max_iterations: int = 50
    joint_max_iterations: int = 100
    tol_rel: float = 1e-8
    ablations: frozenset = frozenset()

    def __post_init__(self):
        self.schedule = tuple(self.schedule)
        self.ablations = frozenset(self.ablations)
        if not self.schedule:
            raise ValueError("stage schedule must not be empty")
        unknown = [s for s in self.schedule if s not in STAGE_MASKS]
        if unknown:
            raise ValueError("unknown stages: %s" % unknown)
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ValueError("unknown ablations: %s" % sorted(bad))

    def effective_schedule(self):
        stages = list(self.schedule)
        if "cam_opt_joint" in self.ablations:
            out = []
            for s in stages:
                if s in ("rotations", "translations"):
                    if "poses" not in out:
                        out.append("poses")
                else:
                    out.append(s)
            stages = out
        if "no_fine_adjust" in self.ablations:
            stages = [s for s in stages if s != "joint"]
        return stages

    def iterations_for(self, stage: str) -> int:
        if stage in self.max_iterations:
            return int(self.max_iterations[stage])
        return self.joint_max_iterations if stage == "joint" else self.default_max_iterations


@dataclass
class StageReport:
    stage: str
    iterations: int
    cost_before: float
    cost_after: float
    converged: bool
    median_reprojection: float = float("nan")

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def median_reprojection(state: GraphState, f: Factors, ev: Evaluation | None = None) -> float:
    ev = ev or evaluate(state, f)
    err = np.linalg.norm(ev.rep.res[ev.rep.valid], axis=1)
    return float(np.median(err)) if len(err) else float("nan")


def staged_optimize(state: GraphState, f: Factors, cfg: StageConfig = StageConfig()):
    """Run the block-coordinate schedule, finishing with joint refinement."""
    reports = []
    for k, stage in enumerate(cfg.effective_schedule()):
        opts = SolverOptions(max_iterations=cfg.iterations_for(stage), tol_rel=cfg.tol_rel)
        try:
            state, rep = solve_lm(state, f, STAGE_MASKS[stage], opts)
        except (SingularSystem, NoActiveVariables) as exc:
            raise StageError(k, stage, exc, reports) from exc
        sr = StageReport(stage, rep.iterations, rep.initial_cost, rep.final_cost, rep.converged,
                         median_reprojection(state, f))
        log.info("stage %d %-13s it=%3d cost %.6g -> %.6g  median rep %.3f px", k, stage,
                 rep.iterations, rep.initial_cost, rep.final_cost, sr.median_reprojection)
        reports.append(sr)
    return state, reports


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------


def build_graph(ins: Sequence[InsPoseMeasurement], anchors, K: Intrinsics, T_init: Pose,
                budget: PriorBudget = PriorBudget(), sigma_rep: float = 1.0,
                kernel: RobustKernel = RobustKernel(), z_min: float = Z_MIN):
    """Initial state (poses at their priors, landmarks at their anchor priors) plus factors."""
    ins = sorted(ins, key=lambda m: m.t)
    frames = np.array([m.t for m in ins], dtype=np.int64)
    if len(np.unique(frames)) != len(frames):
        raise ValueError("duplicate INS frame ids")
    fpos = {int(t): i for i, t in enumerate(frames)}
    priors = [camera_pose_prior(m, T_init, budget) for m in ins]
    pq = np.array([p.rotation.q for p, _ in priors]).reshape(-1, 4)
    pt = np.array([p.translation for p, _ in priors]).reshape(-1, 3)
    srot = np.array([s[0] for _, s in priors])
    spos = np.array([s[3] for _, s in priors])

    anchors = [a for a in anchors if any(int(t) in fpos for t in a.frames)]
    lm_ids = np.array([a.id for a in anchors], dtype=np.int64)
    aprior = np.array([a.world_prior for a in anchors]).reshape(-1, 3)
    asig = np.array([a.sigma for a in anchors]).reshape(-1, 3)
    of, ol, ouv = [], [], []
    for j, a in enumerate(anchors):
        for t, px in zip(a.frames, a.pixels):
            if int(t) in fpos:
                of.append(fpos[int(t)])
                ol.append(j)
                ouv.append(px)
    state = GraphState(frames, pq.copy(), pt.copy(), lm_ids, aprior.copy(), K.as_vector(),
                       K.width, K.height)
    factors = Factors(
        pq, pt, srot, spos, aprior, asig,
        np.array(of, dtype=np.int64), np.array(ol, dtype=np.int64),
        np.array(ouv, dtype=float).reshape(-1, 2),
        sigma_rep=sigma_rep, pose_kernel=kernel, anchor_kernel=kernel, rep_kernel=kernel,
        z_min=z_min,
    )
    return state, factors
