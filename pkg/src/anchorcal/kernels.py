"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``ANCHORCAL_PURE_PYTHON=1`` to force the numpy fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py as _py
from ._kernels_py import NormalBlocks, ReprojBlocks

_c = None
if os.environ.get("ANCHORCAL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _c
    except ImportError:  # pragma: no cover - depends on build
        _c = None

BACKEND = "compiled" if _c is not None else "numpy"

__all__ = [
    "BACKEND",
    "NormalBlocks",
    "ReprojBlocks",
    "accumulate_blocks",
    "reprojection_blocks",
    "schur_pose_blocks",
    "use_backend",
]


def use_backend(name: str) -> str:
    """Switch backend at runtime ("compiled" or "numpy"); returns the previous one."""
    global BACKEND
    prev = BACKEND
    if name == "compiled" and _c is None:
        raise RuntimeError("compiled kernels are not available")
    if name not in ("compiled", "numpy"):
        raise ValueError(name)
    BACKEND = name
    return prev


def compiled_available() -> bool:
    return _c is not None


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def reprojection_blocks(K, R, p, X, fidx, lidx, uv, z_min) -> ReprojBlocks:
    if BACKEND == "compiled":
        out = _c.reprojection_blocks(
            _f64(K), _f64(R), _f64(p), _f64(X), _i64(fidx), _i64(lidx), _f64(uv), float(z_min)
        )
        return ReprojBlocks(*out)
    return _py.reprojection_blocks(
        _f64(K), _f64(R), _f64(p), _f64(X), _i64(fidx), _i64(lidx), _f64(uv), float(z_min)
    )


def accumulate_blocks(w, blocks: ReprojBlocks, fidx, lidx, n_frames, n_landmarks) -> NormalBlocks:
    if BACKEND == "compiled":
        out = _c.accumulate_blocks(
            _f64(w),
            _f64(blocks.res),
            _f64(blocks.j_pose),
            _f64(blocks.j_point),
            _f64(blocks.j_intr),
            _i64(fidx),
            _i64(lidx),
            int(n_frames),
            int(n_landmarks),
        )
        return NormalBlocks(*out)
    return _py.accumulate_blocks(w, blocks, _i64(fidx), _i64(lidx), int(n_frames), int(n_landmarks))


def schur_pose_blocks(hpl, hll_inv, lidx, pair_a, pair_b, pair_block, n_blocks):
    if BACKEND == "compiled":
        return _c.schur_pose_blocks(
            _f64(hpl),
            _f64(hll_inv),
            _i64(lidx),
            _i64(pair_a),
            _i64(pair_b),
            _i64(pair_block),
            int(n_blocks),
        )
    return _py.schur_pose_blocks(
        _f64(hpl), _f64(hll_inv), _i64(lidx), _i64(pair_a), _i64(pair_b), _i64(pair_block),
        int(n_blocks),
    )
