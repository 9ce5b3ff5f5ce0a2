# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def reprojection_blocks(const double[::1] K, const double[:, :, ::1] R, const double[:, ::1] p,
                        const double[:, ::1] X, const cnp.int64_t[::1] fidx,
                        const cnp.int64_t[::1] lidx, const double[:, ::1] uv, double z_min):
    cdef Py_ssize_t M = fidx.shape[0]
    res_a = np.zeros((M, 2))
    jp_a = np.zeros((M, 2, 6))
    jl_a = np.zeros((M, 2, 3))
    jk_a = np.zeros((M, 2, 8))
    valid_a = np.zeros(M, dtype=np.bool_)
    cdef double[:, ::1] res = res_a
    cdef double[:, :, ::1] jp = jp_a
    cdef double[:, :, ::1] jl = jl_a
    cdef double[:, :, ::1] jk = jk_a
    cdef cnp.npy_bool[::1] valid = valid_a

    cdef double fx = K[0], fy = K[1], cx = K[2], cy = K[3]
    cdef double k1 = K[4], k2 = K[5], p1 = K[6], p2 = K[7]
    cdef Py_ssize_t m, f, l, r, c
    cdef double d0, d1, d2, X0, X1, X2, iz, x, y, r2, radial, xd, yd, dr
    cdef double a, b, cc, A00, A01, A10, A11
    cdef double P[2][3]

    for m in range(M):
        f = fidx[m]
        l = lidx[m]
        d0 = X[l, 0] - p[f, 0]
        d1 = X[l, 1] - p[f, 1]
        d2 = X[l, 2] - p[f, 2]
        X0 = R[f, 0, 0] * d0 + R[f, 1, 0] * d1 + R[f, 2, 0] * d2
        X1 = R[f, 0, 1] * d0 + R[f, 1, 1] * d1 + R[f, 2, 1] * d2
        X2 = R[f, 0, 2] * d0 + R[f, 1, 2] * d1 + R[f, 2, 2] * d2
        if not X2 > z_min:
            continue
        valid[m] = 1
        iz = 1.0 / X2
        x = X0 * iz
        y = X1 * iz
        r2 = x * x + y * y
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        res[m, 0] = uv[m, 0] - (fx * xd + cx)
        res[m, 1] = uv[m, 1] - (fy * yd + cy)

        dr = k1 + 2.0 * k2 * r2
        a = radial + 2.0 * x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x
        b = 2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y
        cc = radial + 2.0 * y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x
        A00 = fx * a
        A01 = fx * b
        A10 = fy * b
        A11 = fy * cc
        P[0][0] = A00 * iz
        P[0][1] = A01 * iz
        P[0][2] = -(A00 * x + A01 * y) * iz
        P[1][0] = A10 * iz
        P[1][1] = A11 * iz
        P[1][2] = -(A10 * x + A11 * y) * iz

        for r in range(2):
            for c in range(3):
                jl[m, r, c] = -(P[r][0] * R[f, c, 0] + P[r][1] * R[f, c, 1] + P[r][2] * R[f, c, 2])
            jp[m, r, 0] = -(P[r][1] * X2 - P[r][2] * X1)
            jp[m, r, 1] = -(-P[r][0] * X2 + P[r][2] * X0)
            jp[m, r, 2] = -(P[r][0] * X1 - P[r][1] * X0)
            jp[m, r, 3] = P[r][0]
            jp[m, r, 4] = P[r][1]
            jp[m, r, 5] = P[r][2]

        jk[m, 0, 0] = -xd
        jk[m, 1, 1] = -yd
        jk[m, 0, 2] = -1.0
        jk[m, 1, 3] = -1.0
        jk[m, 0, 4] = -fx * x * r2
        jk[m, 1, 4] = -fy * y * r2
        jk[m, 0, 5] = -fx * x * r2 * r2
        jk[m, 1, 5] = -fy * y * r2 * r2
        jk[m, 0, 6] = -fx * 2.0 * x * y
        jk[m, 1, 6] = -fy * (r2 + 2.0 * y * y)
        jk[m, 0, 7] = -fx * (r2 + 2.0 * x * x)
        jk[m, 1, 7] = -fy * 2.0 * x * y

    return res_a, jp_a, jl_a, jk_a, valid_a


def accumulate_blocks(const double[::1] w, const double[:, ::1] res, const double[:, :, ::1] jp,
                      const double[:, :, ::1] jl, const double[:, :, ::1] jk,
                      const cnp.int64_t[::1] fidx, const cnp.int64_t[::1] lidx,
                      Py_ssize_t n_frames, Py_ssize_t n_landmarks):
    cdef Py_ssize_t M = fidx.shape[0]
    hpp_a = np.zeros((n_frames, 6, 6))
    hll_a = np.zeros((n_landmarks, 3, 3))
    hpl_a = np.zeros((M, 6, 3))
    hpk_a = np.zeros((n_frames, 6, 8))
    hlk_a = np.zeros((n_landmarks, 3, 8))
    hkk_a = np.zeros((8, 8))
    gp_a = np.zeros((n_frames, 6))
    gl_a = np.zeros((n_landmarks, 3))
    gk_a = np.zeros(8)
    cdef double[:, :, ::1] hpp = hpp_a
    cdef double[:, :, ::1] hll = hll_a
    cdef double[:, :, ::1] hpl = hpl_a
    cdef double[:, :, ::1] hpk = hpk_a
    cdef double[:, :, ::1] hlk = hlk_a
    cdef double[:, ::1] hkk = hkk_a
    cdef double[:, ::1] gp = gp_a
    cdef double[:, ::1] gl = gl_a
    cdef double[::1] gk = gk_a
    cdef Py_ssize_t m, f, l, i, j
    cdef double wm, a0, a1

    for m in range(M):
        wm = w[m]
        if wm == 0.0:
            continue
        f = fidx[m]
        l = lidx[m]
        for i in range(6):
            a0 = wm * jp[m, 0, i]
            a1 = wm * jp[m, 1, i]
            for j in range(6):
                hpp[f, i, j] += a0 * jp[m, 0, j] + a1 * jp[m, 1, j]
            for j in range(3):
                hpl[m, i, j] = a0 * jl[m, 0, j] + a1 * jl[m, 1, j]
            for j in range(8):
                hpk[f, i, j] += a0 * jk[m, 0, j] + a1 * jk[m, 1, j]
            gp[f, i] += a0 * res[m, 0] + a1 * res[m, 1]
        for i in range(3):
            a0 = wm * jl[m, 0, i]
            a1 = wm * jl[m, 1, i]
            for j in range(3):
                hll[l, i, j] += a0 * jl[m, 0, j] + a1 * jl[m, 1, j]
            for j in range(8):
                hlk[l, i, j] += a0 * jk[m, 0, j] + a1 * jk[m, 1, j]
            gl[l, i] += a0 * res[m, 0] + a1 * res[m, 1]
        for i in range(8):
            a0 = wm * jk[m, 0, i]
            a1 = wm * jk[m, 1, i]
            for j in range(8):
                hkk[i, j] += a0 * jk[m, 0, j] + a1 * jk[m, 1, j]
            gk[i] += a0 * res[m, 0] + a1 * res[m, 1]

    return hpp_a, hll_a, hpl_a, hpk_a, hlk_a, hkk_a, gp_a, gl_a, gk_a


def schur_pose_blocks(const double[:, :, ::1] hpl, const double[:, :, ::1] hll_inv,
                      const cnp.int64_t[::1] lidx, const cnp.int64_t[::1] pair_a,
                      const cnp.int64_t[::1] pair_b, const cnp.int64_t[::1] pair_block,
                      Py_ssize_t n_blocks):
    cdef Py_ssize_t M = hpl.shape[0]
    cdef Py_ssize_t n = pair_a.shape[0]
    W_a = np.empty((M, 6, 3))
    out_a = np.zeros((n_blocks, 6, 6))
    cdef double[:, :, ::1] W = W_a
    cdef double[:, :, ::1] out = out_a
    cdef Py_ssize_t m, l, i, j, q, a, b, blk

    for m in range(M):
        l = lidx[m]
        for i in range(6):
            for j in range(3):
                W[m, i, j] = (hpl[m, i, 0] * hll_inv[l, 0, j] + hpl[m, i, 1] * hll_inv[l, 1, j]
                              + hpl[m, i, 2] * hll_inv[l, 2, j])
    for q in range(n):
        a = pair_a[q]
        b = pair_b[q]
        blk = pair_block[q]
        for i in range(6):
            for j in range(6):
                out[blk, i, j] += (W[a, i, 0] * hpl[b, j, 0] + W[a, i, 1] * hpl[b, j, 1]
                                   + W[a, i, 2] * hpl[b, j, 2])
    return out_a
