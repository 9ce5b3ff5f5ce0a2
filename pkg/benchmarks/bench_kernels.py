"""Compare the compiled kernels with the numpy fallback on a bundle-sized problem.

    python3 benchmarks/bench_kernels.py [--frames 300] [--obs-per-frame 300] [--repeat 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from anchorcal import kernels
from anchorcal.geometry import quat_exp, quat_to_matrix
from anchorcal.graph import _build_pairs


def make_problem(n_frames, per_frame, track, rng):
    n_lm = n_frames * per_frame // track
    X = np.column_stack([rng.uniform(-500, 500, n_lm), rng.uniform(-500, 500, n_lm), rng.normal(0, 10, n_lm)])
    # nadir cameras 300 m up, small attitude jitter
    flip = np.diag([1.0, -1.0, -1.0])
    R = quat_to_matrix(quat_exp(rng.normal(0, 0.02, (n_frames, 3)))) @ flip
    p = np.column_stack([rng.uniform(-300, 300, n_frames), rng.uniform(-300, 300, n_frames),
                         np.full(n_frames, 300.0)])
    lidx = np.repeat(np.arange(n_lm), track)[: n_frames * per_frame]
    fidx = np.sort(rng.integers(0, n_frames, len(lidx)))
    uv = rng.uniform(0, 1600, (len(lidx), 2))
    K = np.array([1386.0, 1386.0, 803.5, 546.0, -0.05, 0.01, 2e-4, -1e-4])
    return K, R, p, X, fidx, lidx, uv, n_lm


def timeit(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--obs-per-frame", type=int, default=300)
    ap.add_argument("--track", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    K, R, p, X, fidx, lidx, uv, n_lm = make_problem(args.frames, args.obs_per_frame, args.track, rng)
    pa, pb, pblk, bfa, _ = _build_pairs(fidx, lidx, args.frames)
    nblk = len(bfa)
    print("problem: %d frames, %d landmarks, %d observations, %d pose pairs"
          % (args.frames, n_lm, len(fidx), nblk))
    if not kernels.compiled_available():
        print("compiled kernels unavailable; only the numpy backend can run")

    backends = ["numpy"] + (["compiled"] if kernels.compiled_available() else [])
    rows = {}
    prev = kernels.BACKEND
    try:
        for be in backends:
            kernels.use_backend(be)
            rb = kernels.reprojection_blocks(K, R, p, X, fidx, lidx, uv, 1e-3)
            w = np.ones(len(fidx))
            nb = kernels.accumulate_blocks(w, rb, fidx, lidx, args.frames, n_lm)
            hll_inv = np.linalg.inv(nb.hll + np.eye(3) * 1e-6)
            rows[be] = {
                "reprojection": timeit(lambda: kernels.reprojection_blocks(K, R, p, X, fidx, lidx, uv, 1e-3), args.repeat),
                "accumulate": timeit(lambda: kernels.accumulate_blocks(w, rb, fidx, lidx, args.frames, n_lm), args.repeat),
                "schur": timeit(lambda: kernels.schur_pose_blocks(nb.hpl, hll_inv, lidx, pa, pb, pblk, nblk), args.repeat),
            }
    finally:
        kernels.use_backend(prev)

    print("%-14s" % "kernel" + "".join("%12s" % b for b in backends) + ("%10s" % "speedup" if len(backends) == 2 else ""))
    for k in rows["numpy"]:
        line = "%-14s" % k + "".join("%10.2fms" % (rows[b][k] * 1e3) for b in backends)
        if len(backends) == 2:
            line += "%9.1fx" % (rows["numpy"][k] / rows["compiled"][k])
        print(line)


if __name__ == "__main__":
    main()
