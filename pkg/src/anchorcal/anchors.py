"""Satellite-pixel to world lifting, correspondence filters and anchor assembly."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3


class OutOfBounds(ValueError):
    pass


class InconsistentTrack(ValueError):
    pass


@dataclass(frozen=True)
class ElevationGrid:
    """Height raster; ``heights[row, col]`` sits at ``origin + (col, row) * cell_size``.

    Rows increase northwards, columns eastwards.
    """

    origin: tuple
    cell_size: float
    heights: np.ndarray
    sigma_z: float = 0.5

    def __post_init__(self):
        h = np.array(self.heights, dtype=float)
        if h.ndim != 2 or min(h.shape) < 2:
            raise ValueError("heights must be a 2-D array with at least 2x2 cells")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if not np.all(np.isfinite(h)):
            raise ValueError("heights must be finite")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def rows(self) -> int:
        return self.heights.shape[0]

    @property
    def cols(self) -> int:
        return self.heights.shape[1]

    @property
    def extent(self):
        """(xmin, xmax, ymin, ymax) covered by cell centers."""
        x0, y0 = self.origin
        return (
            x0,
            x0 + (self.cols - 1) * self.cell_size,
            y0,
            y0 + (self.rows - 1) * self.cell_size,
        )

    def contains(self, x, y):
        xmin, xmax, ymin, ymax = self.extent
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)

    def cell_center(self, row, col):
        return (
            self.origin[0] + np.asarray(col) * self.cell_size,
            self.origin[1] + np.asarray(row) * self.cell_size,
        )

    def to_json(self, blob_name: str | None = None) -> dict:
        obj = {
            "origin": list(self.origin),
            "cell_size": self.cell_size,
            "rows": self.rows,
            "cols": self.cols,
            "sigma_z": self.sigma_z,
        }
        if blob_name is None:
            obj["heights"] = self.heights.ravel().tolist()
        else:
            obj["blob"] = blob_name
        return obj

    def dump(self, path, binary: bool = True) -> None:
        """Write the JSON header (and a float32 little-endian blob next to it)."""
        path = os.fspath(path)
        blob = None
        if binary:
            blob = os.path.splitext(os.path.basename(path))[0] + ".f32"
            self.heights.astype("<f4").tofile(os.path.join(os.path.dirname(path), blob))
        with open(path, "w") as fh:
            json.dump(self.to_json(blob), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ElevationGrid":
        path = os.fspath(path)
        with open(path) as fh:
            obj = json.load(fh)
        rows, cols = int(obj["rows"]), int(obj["cols"])
        if "heights" in obj:
            h = np.asarray(obj["heights"], dtype=float)
        elif "blob" in obj:
            h = np.fromfile(os.path.join(os.path.dirname(path), obj["blob"]), dtype="<f4")
            h = h.astype(float)
        else:
            raise ValueError("DEM file needs 'heights' or 'blob'")
        if h.size != rows * cols:
            raise ValueError("DEM holds %d heights, header says %dx%d" % (h.size, rows, cols))
        return cls(tuple(obj["origin"]), float(obj["cell_size"]), h.reshape(rows, cols),
                   float(obj.get("sigma_z", 0.5)))


@dataclass(frozen=True)
class OrthoMeta:
    """North-up orthophoto georeference. ``origin`` is the bottom-left pixel."""

    origin: tuple
    resolution: float  # px / m
    width: int
    height: int

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    def to_json(self) -> dict:
        return {
            "origin": list(self.origin),
            "resolution": self.resolution,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, obj) -> "OrthoMeta":
        return cls(tuple(obj["origin"]), float(obj["resolution"]), int(obj["width"]),
                   int(obj["height"]))


@dataclass(frozen=True)
class Correspondence:
    t: int
    landmark: int
    uav_pixel: tuple
    sat_pixel: tuple


@dataclass
class Anchor:
    id: int
    world_prior: np.ndarray
    sigma: np.ndarray
    frames: np.ndarray  # (n,) sorted frame indices
    pixels: np.ndarray  # (n, 2)

    def __post_init__(self):
        self.world_prior = np.asarray(self.world_prior, dtype=float).reshape(3)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(3)
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if len(self.frames) == 0:
            raise ValueError("anchor %d has no observations" % self.id)
        if len(np.unique(self.frames)) != len(self.frames):
            raise ValueError("anchor %d observed twice in one frame" % self.id)
        if not np.all(self.sigma > 0):
            raise ValueError("anchor sigma must be positive")

    @property
    def observations(self):
        return [(int(t), tuple(px)) for t, px in zip(self.frames, self.pixels)]

    def to_json(self) -> dict:
        return {
            "id": int(self.id),
            "X": [float(v) for v in self.world_prior],
            "sigma": [float(v) for v in self.sigma],
            "obs": [[int(t), float(u), float(v)] for t, (u, v) in zip(self.frames, self.pixels)],
        }

    @classmethod
    def from_json(cls, obj) -> "Anchor":
        obs = np.asarray(obj["obs"], dtype=float).reshape(-1, 3)
        order = np.argsort(obs[:, 0], kind="stable")
        obs = obs[order]
        return cls(int(obj["id"]), obj["X"], obj["sigma"], obs[:, 0].astype(np.int64), obs[:, 1:])


def dump_anchors(anchors, path) -> None:
    with open(path, "w") as fh:
        json.dump({"anchors": [a.to_json() for a in anchors]}, fh)
        fh.write("\n")


def load_anchors(path):
    with open(path) as fh:
        obj = json.load(fh)
    return [Anchor.from_json(a) for a in obj["anchors"]]


# ---------------------------------------------------------------------------
# DEM / ortho operations
# ---------------------------------------------------------------------------


def sample_elevation(dem: ElevationGrid, x, y):
    """Bilinear height at ``(x, y)``; scalar or array input."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.all(dem.contains(x, y)):
        raise OutOfBounds("query outside DEM extent")
    out = _bilinear(dem, x, y)
    return float(out) if out.ndim == 0 else out


def _bilinear(dem: ElevationGrid, x, y):
    gx = (x - dem.origin[0]) / dem.cell_size
    gy = (y - dem.origin[1]) / dem.cell_size
    c0 = np.clip(np.floor(gx).astype(np.int64), 0, dem.cols - 2)
    r0 = np.clip(np.floor(gy).astype(np.int64), 0, dem.rows - 2)
    tx = gx - c0
    ty = gy - r0
    h = dem.heights
    # lerp form: exact on constant patches
    lo = h[r0, c0] + tx * (h[r0, c0 + 1] - h[r0, c0])
    hi = h[r0 + 1, c0] + tx * (h[r0 + 1, c0 + 1] - h[r0 + 1, c0])
    return lo + ty * (hi - lo)


def sat_pixel_to_xy(v, ortho: OrthoMeta):
    v = np.asarray(v, dtype=float)
    col, row = v[..., 0], v[..., 1]
    x = ortho.origin[0] + col / ortho.resolution
    y = ortho.origin[1] + (ortho.height - 1 - row) / ortho.resolution
    return np.stack([x, y], axis=-1)


def world_to_sat_pixel(xy, ortho: OrthoMeta):
    xy = np.asarray(xy, dtype=float)
    col = (xy[..., 0] - ortho.origin[0]) * ortho.resolution
    row = ortho.height - 1 - (xy[..., 1] - ortho.origin[1]) * ortho.resolution
    return np.stack([col, row], axis=-1)


def _in_ortho(v, ortho: OrthoMeta):
    v = np.asarray(v, dtype=float)
    return (v[..., 0] >= 0) & (v[..., 0] <= ortho.width - 1) & (v[..., 1] >= 0) & (
        v[..., 1] <= ortho.height - 1
    )


def sat_pixel_to_world(v, ortho: OrthoMeta, dem: ElevationGrid) -> np.ndarray:
    """Lift a satellite pixel (or an (N, 2) array of them) to ENU world points."""
    v = np.asarray(v, dtype=float)
    if not np.all(_in_ortho(v, ortho)):
        raise OutOfBounds("satellite pixel outside orthophoto")
    xy = sat_pixel_to_xy(v, ortho)
    z = sample_elevation(dem, xy[..., 0], xy[..., 1])
    return np.concatenate([xy, np.asarray(z)[..., None]], axis=-1)


def slope_filter(candidate, dem: ElevationGrid, window_radius: float = 5.0,
                 max_range: float = 3.0):
    """Accept candidate(s) whose local DEM min-max range is at most ``max_range``.

    ``candidate`` is one point or an (N, >=2) array; returns bool or bool array.
    Candidates whose window is not fully covered by the grid are rejected.
    """
    c = np.asarray(candidate, dtype=float)
    single = c.ndim == 1
    c = np.atleast_2d(c)
    x, y = c[:, 0], c[:, 1]
    if math.isinf(max_range):
        ok = dem.contains(x, y)
        return bool(ok[0]) if single else ok
    r = float(window_radius)
    covered = dem.contains(x - r, y - r) & dem.contains(x + r, y + r)
    gx = (x - dem.origin[0]) / dem.cell_size
    gy = (y - dem.origin[1]) / dem.cell_size
    reach = int(math.ceil(r / dem.cell_size)) + 1
    lo = np.full(len(x), np.inf)
    hi = np.full(len(x), -np.inf)
    c0 = np.floor(gx).astype(np.int64)
    r0 = np.floor(gy).astype(np.int64)
    for dr in range(-reach, reach + 1):
        for dc in range(-reach, reach + 1):
            rr = r0 + dr
            cc = c0 + dc
            inside = (rr >= 0) & (rr < dem.rows) & (cc >= 0) & (cc < dem.cols)
            dist = np.hypot((cc - gx) * dem.cell_size, (rr - gy) * dem.cell_size)
            use = inside & (dist <= r)
            if not np.any(use):
                continue
            h = dem.heights[np.clip(rr, 0, dem.rows - 1), np.clip(cc, 0, dem.cols - 1)]
            lo = np.where(use, np.minimum(lo, h), lo)
            hi = np.where(use, np.maximum(hi, h), hi)
    ok = covered & np.isfinite(lo) & ((hi - lo) <= max_range)
    return bool(ok[0]) if single else ok


def min_spacing_filter(candidates, spacing: float):
    """Greedy in input order: keep a candidate iff its UAV pixel is at least
    ``spacing`` away from every previously kept one."""
    if spacing <= 0:
        return list(candidates)
    kept = []
    kept_px = np.empty((0, 2))
    s2 = spacing * spacing
    for c in candidates:
        px = np.asarray(c.uav_pixel, dtype=float)
        if len(kept_px) and np.min(np.sum((kept_px - px) ** 2, axis=1)) < s2:
            continue
        kept.append(c)
        kept_px = np.vstack([kept_px, px])
    return kept


def anchor_covariance(ortho: OrthoMeta, sigma_dem_z: float, sigma_match: float) -> np.ndarray:
    """Per-axis anchor standard deviations (independent variances add)."""
    sxy = math.sqrt((1.0 / ortho.resolution) ** 2 + sigma_match**2)
    sz = math.sqrt(sigma_dem_z**2 + sigma_match**2)
    return np.array([sxy, sxy, max(sz, SIGMA_FLOOR)])


@dataclass
class AnchorConfig:
    sigma_match: float = 0.3
    slope_window: float = 5.0
    slope_max_range: float = 3.0
    min_spacing: float = 10.0
    use_slope_filter: bool = True
    use_spacing_filter: bool = True


@dataclass
class AnchorStats:
    candidates: int = 0
    out_of_bounds: int = 0
    slope_rejected: int = 0
    spacing_rejected: int = 0
    inconsistent: int = 0
    anchors: int = 0
    observations: int = 0

    def as_dict(self):
        return dict(self.__dict__)


def build_anchors(frames, ortho: OrthoMeta, dem: ElevationGrid, cfg: AnchorConfig | None = None,
                  stats: AnchorStats | None = None):
    """Assemble anchors from per-frame correspondences.

    ``frames`` maps frame index -> list of :class:`Correspondence` (or is an
    iterable of ``(t, list)`` pairs).  Landmark ids act as the track map.  The
    world prior of each anchor is lifted from the satellite pixel of its first
    frame.  Filters are evaluated on that first-frame correspondence, and an
    anchor that fails them is dropped from every frame.
    """
    cfg = cfg or AnchorConfig()
    stats = stats if stats is not None else AnchorStats()
    items = sorted(dict(frames).items()) if not isinstance(frames, list) else sorted(frames)
    sigma = anchor_covariance(ortho, dem.sigma_z, cfg.sigma_match)

    first = OrderedDict()  # landmark -> (t, sat_pixel)
    per_lm = {}
    for t, corrs in items:
        for c in corrs:
            stats.candidates += 1
            per_lm.setdefault(c.landmark, []).append(c)
            if c.landmark not in first:
                first[c.landmark] = (t, c.sat_pixel)
    if not first:
        return []

    lm_ids = np.array(list(first.keys()))
    sat = np.array([first[j][1] for j in lm_ids], dtype=float)
    in_ortho = _in_ortho(sat, ortho)
    xy = sat_pixel_to_xy(sat, ortho)
    ok = in_ortho & dem.contains(xy[:, 0], xy[:, 1])
    stats.out_of_bounds = int(np.sum(~ok))
    priors = np.full((len(lm_ids), 3), np.nan)
    priors[ok, :2] = xy[ok]
    priors[ok, 2] = _bilinear(dem, xy[ok, 0], xy[ok, 1])

    alive = ok.copy()
    if cfg.use_slope_filter:
        slope_ok = np.zeros(len(lm_ids), dtype=bool)
        if np.any(ok):
            slope_ok[ok] = slope_filter(priors[ok], dem, cfg.slope_window, cfg.slope_max_range)
        stats.slope_rejected = int(np.sum(ok & ~slope_ok))
        alive &= slope_ok
    alive_set = {int(j) for j, a in zip(lm_ids, alive) if a}

    # inconsistent tracks: later satellite lifts far from the first one
    index = {int(j): k for k, j in enumerate(lm_ids)}
    for j in list(alive_set):
        corrs = per_lm[j]
        if len(corrs) < 2:
            continue
        vs = np.array([c.sat_pixel for c in corrs], dtype=float)
        if np.all(vs == vs[0]):
            continue
        if not np.all(_in_ortho(vs, ortho)):
            alive_set.discard(j)
            stats.inconsistent += 1
            continue
        other = sat_pixel_to_xy(vs, ortho)
        inside = dem.contains(other[:, 0], other[:, 1])
        if not np.all(inside):
            alive_set.discard(j)
            stats.inconsistent += 1
            continue
        pts = np.column_stack([other, _bilinear(dem, other[:, 0], other[:, 1])])
        if np.any(np.abs(pts - priors[index[j]]) > 3.0 * sigma):
            alive_set.discard(j)
            stats.inconsistent += 1
    if stats.inconsistent:
        log.warning("dropped %d anchors with inconsistent tracks", stats.inconsistent)

    if cfg.use_spacing_filter and cfg.min_spacing > 0:
        dropped = set()
        for t, corrs in items:
            cand = [c for c in corrs if c.landmark in alive_set and first[c.landmark][0] == t]
            kept = {id(c) for c in min_spacing_filter(cand, cfg.min_spacing)}
            dropped.update(c.landmark for c in cand if id(c) not in kept)
        stats.spacing_rejected = len(dropped)
        alive_set -= dropped

    anchors = []
    for k, j in enumerate(lm_ids):
        j = int(j)
        if j not in alive_set:
            continue
        seen = {}
        for c in per_lm[j]:
            seen.setdefault(c.t, c.uav_pixel)
        ts = np.array(sorted(seen), dtype=np.int64)
        px = np.array([seen[t] for t in ts], dtype=float)
        anchors.append(Anchor(j, priors[k], sigma, ts, px))
    stats.anchors = len(anchors)
    stats.observations = int(sum(len(a.frames) for a in anchors))
    return anchors


# ---------------------------------------------------------------------------
# correspondence JSONL
# ---------------------------------------------------------------------------


def read_correspondences(path):
    """Read ``{"t", "corrs": [{"lm", "u", "v"}]}`` lines -> {t: [Correspondence]}."""
    frames = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                t = int(rec["t"])
                frames[t] = [
                    Correspondence(t, int(c["lm"]), tuple(map(float, c["u"])), tuple(map(float, c["v"])))
                    for c in rec["corrs"]
                ]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError("%s:%d: bad correspondence record (%s)" % (path, lineno, exc)) from exc
    return frames


def write_correspondences(frames, path) -> None:
    with open(path, "w") as fh:
        for t in sorted(frames):
            rec = {
                "t": int(t),
                "corrs": [
                    {"lm": int(c.landmark), "u": [float(c.uav_pixel[0]), float(c.uav_pixel[1])],
                     "v": [float(c.sat_pixel[0]), float(c.sat_pixel[1])]}
                    for c in frames[t]
                ],
            }
            fh.write(json.dumps(rec) + "\n")
