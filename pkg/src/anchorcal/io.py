"""Dataset file formats shared by the simulator, the pipeline and the CLI."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .anchors import ElevationGrid, OrthoMeta, read_correspondences, write_correspondences
from .camera import Intrinsics
from .geometry import Pose
from .graph import InsPoseMeasurement

SEQUENCE = "sequence.jsonl"
CORRESPONDENCES = "correspondences.jsonl"
ANCHORS = "anchors.json"
DEM = "dem.json"
ORTHO = "ortho.json"
VL_MATCHES = "vl_matches.jsonl"
TRUTH = "truth.json"
INIT_INTRINSICS = "init_intrinsics.json"
INIT_EXTRINSICS = "init_extrinsics.json"


class DataFormatError(ValueError):
    """A dataset file is missing, malformed or inconsistent."""


def _finite(vals, what, where):
    arr = np.asarray(vals, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DataFormatError("%s: non-finite %s" % (where, what))
    return arr


def write_json(obj, path, indent=None) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=indent, sort_keys=False)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataFormatError("missing file %s" % path) from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError("%s:%d: invalid JSON (%s)" % (path, exc.lineno, exc.msg)) from exc


def write_sequence(ins, path) -> None:
    with open(path, "w") as fh:
        for m in ins:
            rec = {"t": int(m.t), **m.pose.to_json(), "sigma_rot": float(m.sigma_rot),
                   "sigma_pos": float(m.sigma_pos)}
            fh.write(json.dumps(rec) + "\n")


def read_sequence(path):
    out = []
    try:
        fh = open(path)
    except FileNotFoundError as exc:
        raise DataFormatError("missing file %s" % path) from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = "%s:%d" % (path, lineno)
            try:
                rec = json.loads(line)
                q = _finite(rec["q"], "quaternion", where)
                p = _finite(rec["p"], "position", where)
                if q.shape != (4,) or p.shape != (3,) or np.linalg.norm(q) < 1e-9:
                    raise DataFormatError("%s: bad pose shape" % where)
                out.append(InsPoseMeasurement(int(rec["t"]), Pose.from_json({"q": q, "p": p}),
                                              float(rec["sigma_rot"]), float(rec["sigma_pos"])))
            except DataFormatError:
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise DataFormatError("%s: bad sequence record (%s)" % (where, exc)) from exc
    ts = [m.t for m in out]
    if len(set(ts)) != len(ts):
        raise DataFormatError("%s: duplicate frame ids" % path)
    return out


def write_poses(frames, poses, path) -> None:
    with open(path, "w") as fh:
        for t, P in zip(frames, poses):
            fh.write(json.dumps({"t": int(t), **P.to_json()}) + "\n")


def read_poses(path):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rec = json.loads(line)
                    out[int(rec["t"])] = Pose.from_json(rec)
                except (KeyError, TypeError, ValueError) as exc:
                    raise DataFormatError("%s:%d: bad pose record (%s)" % (path, lineno, exc)) from exc
    return out


def load_pose(path) -> Pose:
    obj = read_json(path)
    try:
        return Pose.from_json(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError("%s: bad pose (%s)" % (path, exc)) from exc


def dump_pose(P: Pose, path, extra: dict | None = None) -> None:
    obj = P.to_json()
    if extra:
        obj.update(extra)
    write_json(obj, path, indent=2)


def load_intrinsics(path) -> Intrinsics:
    obj = read_json(path)
    try:
        K = Intrinsics.from_json(obj)
        K.validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError("%s: bad intrinsics (%s)" % (path, exc)) from exc
    return K


@dataclass
class VlFrame:
    t: int
    X: np.ndarray  # (n, 3)
    u: np.ndarray  # (n, 2)


def write_vl_matches(frames, path) -> None:
    with open(path, "w") as fh:
        for fr in frames:
            rec = {"t": int(fr.t), "matches": [
                {"X": [float(v) for v in X], "u": [float(v) for v in u]} for X, u in zip(fr.X, fr.u)
            ]}
            fh.write(json.dumps(rec) + "\n")


def read_vl_matches(path):
    out = []
    try:
        fh = open(path)
    except FileNotFoundError as exc:
        raise DataFormatError("missing file %s" % path) from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                X = np.array([m["X"] for m in rec["matches"]], dtype=float).reshape(-1, 3)
                u = np.array([m["u"] for m in rec["matches"]], dtype=float).reshape(-1, 2)
                out.append(VlFrame(int(rec["t"]), X, u))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataFormatError("%s:%d: bad match record (%s)" % (path, lineno, exc)) from exc
    return out


@dataclass
class Dataset:
    """Everything the refinement and evaluation steps consume."""

    ins: list
    correspondences: dict
    dem: ElevationGrid
    ortho: OrthoMeta
    K_init: Intrinsics
    T_init: Pose
    vl_frames: list = field(default_factory=list)
    truth: dict | None = None


def save_dataset(ds: Dataset, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_sequence(ds.ins, os.path.join(out_dir, SEQUENCE))
    write_correspondences(ds.correspondences, os.path.join(out_dir, CORRESPONDENCES))
    ds.dem.dump(os.path.join(out_dir, DEM))
    write_json(ds.ortho.to_json(), os.path.join(out_dir, ORTHO), indent=2)
    ds.K_init.dump(os.path.join(out_dir, INIT_INTRINSICS))
    dump_pose(ds.T_init, os.path.join(out_dir, INIT_EXTRINSICS))
    write_vl_matches(ds.vl_frames, os.path.join(out_dir, VL_MATCHES))
    if ds.truth is not None:
        write_json(ds.truth, os.path.join(out_dir, TRUTH))


def load_dataset(data_dir, intrinsics=None, extrinsics=None, need_vl: bool = False) -> Dataset:
    """Load a dataset directory; calibration paths default to the emitted initial files."""
    j = lambda name: os.path.join(data_dir, name)  # noqa: E731
    if not os.path.isdir(data_dir):
        raise DataFormatError("dataset directory %s does not exist" % data_dir)
    ins = read_sequence(j(SEQUENCE))
    if not ins:
        raise DataFormatError("%s is empty" % j(SEQUENCE))
    try:
        corrs = read_correspondences(j(CORRESPONDENCES))
    except FileNotFoundError as exc:
        raise DataFormatError("missing file %s" % j(CORRESPONDENCES)) from exc
    except ValueError as exc:
        raise DataFormatError(str(exc)) from exc
    try:
        dem = ElevationGrid.load(j(DEM))
        ortho = OrthoMeta.from_json(read_json(j(ORTHO)))
    except DataFormatError:
        raise
    except (FileNotFoundError, KeyError, TypeError, ValueError) as exc:
        raise DataFormatError("bad DEM/ortho metadata: %s" % exc) from exc
    K = load_intrinsics(intrinsics or j(INIT_INTRINSICS))
    T = load_pose(extrinsics or j(INIT_EXTRINSICS))
    vl = []
    if need_vl or os.path.exists(j(VL_MATCHES)):
        vl = read_vl_matches(j(VL_MATCHES))
    truth = read_json(j(TRUTH)) if os.path.exists(j(TRUTH)) else None
    known = {m.t for m in ins}
    stray = sorted(set(corrs) - known)
    if stray:
        raise DataFormatError("correspondences reference unknown frames, e.g. %d" % stray[0])
    return Dataset(ins, corrs, dem, ortho, K, T, vl, truth)


def deg(rad: float) -> float:
    return rad * 180.0 / math.pi
