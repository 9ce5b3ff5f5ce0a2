"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` exactly (same arguments, same outputs) and are
used when the compiled extension is unavailable or disabled.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class ReprojBlocks(NamedTuple):
    res: np.ndarray  # (M, 2) observed - predicted
    j_pose: np.ndarray  # (M, 2, 6) d res / d right-twist of camera pose
    j_point: np.ndarray  # (M, 2, 3)
    j_intr: np.ndarray  # (M, 2, 8)
    valid: np.ndarray  # (M,) bool


class NormalBlocks(NamedTuple):
    hpp: np.ndarray  # (F, 6, 6)
    hll: np.ndarray  # (L, 3, 3)
    hpl: np.ndarray  # (M, 6, 3), one block per observation
    hpk: np.ndarray  # (F, 6, 8)
    hlk: np.ndarray  # (L, 3, 8)
    hkk: np.ndarray  # (8, 8)
    gp: np.ndarray  # (F, 6)
    gl: np.ndarray  # (L, 3)
    gk: np.ndarray  # (8,)


def reprojection_blocks(K, R, p, X, fidx, lidx, uv, z_min):
    K = np.asarray(K, dtype=float)
    fx, fy, cx, cy, k1, k2, p1, p2 = K
    Rm = R[fidx]
    d = X[lidx] - p[fidx]
    Xc = np.einsum("mji,mj->mi", Rm, d)
    valid = Xc[:, 2] > z_min
    z = np.where(valid, Xc[:, 2], 1.0)
    iz = 1.0 / z
    x = Xc[:, 0] * iz
    y = Xc[:, 1] * iz
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    M = len(fidx)
    res = np.empty((M, 2))
    res[:, 0] = uv[:, 0] - (fx * xd + cx)
    res[:, 1] = uv[:, 1] - (fy * yd + cy)

    dr = k1 + 2.0 * k2 * r2
    a = radial + 2.0 * x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x
    b = 2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y
    c = radial + 2.0 * y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x
    # d pixel / d normalized
    A = np.empty((M, 2, 2))
    A[:, 0, 0] = fx * a
    A[:, 0, 1] = fx * b
    A[:, 1, 0] = fy * b
    A[:, 1, 1] = fy * c
    # d normalized / d Xc
    N = np.zeros((M, 2, 3))
    N[:, 0, 0] = iz
    N[:, 0, 2] = -x * iz
    N[:, 1, 1] = iz
    N[:, 1, 2] = -y * iz
    P = A @ N  # d pixel / d Xc

    j_point = -P @ Rm.transpose(0, 2, 1)
    j_pose = np.empty((M, 2, 6))
    # d Xc / d omega = [Xc]x ; d Xc / d v = -I
    X0, X1, X2 = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    for r in range(2):
        P0, P1, P2 = P[:, r, 0], P[:, r, 1], P[:, r, 2]
        j_pose[:, r, 0] = -(P1 * X2 - P2 * X1)
        j_pose[:, r, 1] = -(-P0 * X2 + P2 * X0)
        j_pose[:, r, 2] = -(P0 * X1 - P1 * X0)
        j_pose[:, r, 3] = P0
        j_pose[:, r, 4] = P1
        j_pose[:, r, 5] = P2

    j_intr = np.zeros((M, 2, 8))
    j_intr[:, 0, 0] = -xd
    j_intr[:, 1, 1] = -yd
    j_intr[:, 0, 2] = -1.0
    j_intr[:, 1, 3] = -1.0
    j_intr[:, 0, 4] = -fx * x * r2
    j_intr[:, 1, 4] = -fy * y * r2
    j_intr[:, 0, 5] = -fx * x * r2 * r2
    j_intr[:, 1, 5] = -fy * y * r2 * r2
    j_intr[:, 0, 6] = -fx * 2.0 * x * y
    j_intr[:, 1, 6] = -fy * (r2 + 2.0 * y * y)
    j_intr[:, 0, 7] = -fx * (r2 + 2.0 * x * x)
    j_intr[:, 1, 7] = -fy * 2.0 * x * y

    inv = ~valid
    if np.any(inv):
        res[inv] = 0.0
        j_pose[inv] = 0.0
        j_point[inv] = 0.0
        j_intr[inv] = 0.0
    return ReprojBlocks(res, j_pose, j_point, j_intr, valid)


def _sum_by(idx, vals, n):
    return np.bincount(idx, weights=vals, minlength=n)


def accumulate_blocks(w, blocks, fidx, lidx, n_frames, n_landmarks):
    """Weighted Gauss-Newton blocks ``J^T W J`` and ``J^T W r`` per variable."""
    res, jp, jl, jk = blocks.res, blocks.j_pose, blocks.j_point, blocks.j_intr
    w = np.asarray(w, dtype=float)
    wjp = jp * w[:, None, None]
    wjl = jl * w[:, None, None]
    wjk = jk * w[:, None, None]

    hpp = np.empty((n_frames, 6, 6))
    for i in range(6):
        for j in range(i, 6):
            s = _sum_by(fidx, np.einsum("mr,mr->m", wjp[:, :, i], jp[:, :, j]), n_frames)
            hpp[:, i, j] = s
            hpp[:, j, i] = s
    hll = np.empty((n_landmarks, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            s = _sum_by(lidx, np.einsum("mr,mr->m", wjl[:, :, i], jl[:, :, j]), n_landmarks)
            hll[:, i, j] = s
            hll[:, j, i] = s
    hpl = np.einsum("mri,mrj->mij", wjp, jl)
    hpk = np.empty((n_frames, 6, 8))
    for i in range(6):
        for j in range(8):
            hpk[:, i, j] = _sum_by(fidx, np.einsum("mr,mr->m", wjp[:, :, i], jk[:, :, j]), n_frames)
    hlk = np.empty((n_landmarks, 3, 8))
    for i in range(3):
        for j in range(8):
            hlk[:, i, j] = _sum_by(
                lidx, np.einsum("mr,mr->m", wjl[:, :, i], jk[:, :, j]), n_landmarks
            )
    hkk = np.einsum("mri,mrj->ij", wjk, jk)
    gp = np.empty((n_frames, 6))
    for i in range(6):
        gp[:, i] = _sum_by(fidx, np.einsum("mr,mr->m", wjp[:, :, i], res), n_frames)
    gl = np.empty((n_landmarks, 3))
    for i in range(3):
        gl[:, i] = _sum_by(lidx, np.einsum("mr,mr->m", wjl[:, :, i], res), n_landmarks)
    gk = np.einsum("mri,mr->i", wjk, res)
    return NormalBlocks(hpp, hll, hpl, hpk, hlk, hkk, gp, gl, gk)


def schur_pose_blocks(hpl, hll_inv, lidx, pair_a, pair_b, pair_block, n_blocks, chunk=200_000):
    """Sum ``hpl[a] @ hll_inv[l] @ hpl[b].T`` over observation pairs into blocks.

    ``pair_block`` must be sorted ascending; pairs sharing a block id are summed.
    """
    W = np.einsum("mij,mjk->mik", hpl, hll_inv[lidx])
    out = np.zeros((n_blocks, 6, 6))
    n = len(pair_a)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        a, b, bid = pair_a[sl], pair_b[sl], pair_block[sl]
        vals = W[a] @ hpl[b].transpose(0, 2, 1)
        heads = np.flatnonzero(np.r_[True, bid[1:] != bid[:-1]])
        out[bid[heads]] += np.add.reduceat(vals, heads, axis=0)
    return out
