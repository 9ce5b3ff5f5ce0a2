"""Synthetic flights over generated terrain, with known ground truth.

All randomness derives from ``SimConfig.seed`` through independent child
streams (terrain, landmarks, INS noise, pixel noise, anchors, held-out frames),
so changing e.g. the frame count leaves the terrain untouched.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .anchors import Correspondence, ElevationGrid, OrthoMeta, _bilinear, world_to_sat_pixel
from .camera import Intrinsics
from .geometry import (
    Pose,
    Rotation,
    compose,
    matrix_to_quat,
    quat_exp,
    quat_multiply,
    quat_to_matrix,
    se3_exp,
)
from .graph import InsPoseMeasurement
from .io import Dataset, VlFrame


class ConfigInvalid(ValueError):
    """Invalid configuration; ``path`` is the dotted key it concerns, when known."""

    def __init__(self, msg, path=None):
        super().__init__(msg)
        self.path = path


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TerrainConfig:
    cell_size: float = 5.0
    base_height: float = 120.0
    roughness: float = 25.0  # value-noise amplitude, m
    wavelength: float = 900.0  # largest value-noise feature, m
    building_density: float = 60.0  # per km^2
    building_height: float = 18.0
    building_size: tuple = (20.0, 60.0)
    margin: float = 150.0  # extra DEM border around the imaged corridor, m
    extent: tuple | None = None  # (xmin, xmax, ymin, ymax); derived from the flight if None


@dataclass
class TrajectoryConfig:
    altitude_agl: float = 300.0
    altitude_amplitude: float = 0.0  # sinusoidal AGL variation, m
    altitude_period_s: float = 90.0
    speed: float = 30.0
    rate: float = 5.0
    n_frames: int = 1500
    heading_deg: float = 20.0
    heading_amplitude_deg: float = 35.0  # sinusoidal heading profile; 0 flies straight
    heading_period_s: float = 150.0
    roll_amplitude_deg: float = 2.0
    pitch_amplitude_deg: float = 1.5


@dataclass
class CameraTruth:
    fx: float = 1386.0
    fy: float = 1386.0
    cx: float = 803.5
    cy: float = 546.0
    dist: tuple = (-0.05, 0.01, 2e-4, -1e-4)
    width: int = 1600
    height: int = 1100
    # INS(FLU body) -> camera mounting offsets on top of the nominal nadir mount
    boresight_deg: tuple = (0.4, -0.3, 0.8)
    lever_arm: tuple = (0.25, -0.1, -0.35)


@dataclass
class NoiseConfig:
    sigma_ins_rot_deg: float = 0.05
    sigma_ins_pos: float = 0.05
    sigma_pixel: float = 0.5
    sigma_anchor_xy: float = 0.1
    sigma_anchor_z: float = 0.5
    outlier_fraction: float = 0.0
    outlier_radius: float = 50.0


@dataclass
class AnchorSimConfig:
    per_frame: float = 300.0  # target mean observations per frame
    max_track_length: int = 15
    ortho_resolution: float = 10.0  # px / m
    dem_noise_spacing: float = 20.0  # correlation length of DEM height errors, m


@dataclass
class Perturbation:
    focal_rel: float = 0.0
    pp_shift: tuple = (0.0, 0.0)
    dist: tuple = (0.0, 0.0, 0.0, 0.0)
    rot_deg: tuple = (0.0, 0.0, 0.0)  # right-perturbation of T, camera axes
    trans: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def degraded(cls) -> "Perturbation":
        """The standard degraded initialization used by the acceptance runs."""
        return cls(focal_rel=0.01, pp_shift=(5.0, 5.0), rot_deg=(0.0, 0.0, 2.0), trans=(0.1, 0.0, 0.0))


@dataclass
class VlConfig:
    n_frames: int = 40
    matches_per_frame: int = 150


@dataclass
class SimConfig:
    seed: int = 0
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    camera: CameraTruth = field(default_factory=CameraTruth)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    anchors: AnchorSimConfig = field(default_factory=AnchorSimConfig)
    perturbation: Perturbation = field(default_factory=Perturbation.degraded)
    vl: VlConfig = field(default_factory=VlConfig)

    def validate(self) -> None:
        t, tr, n, a = self.terrain, self.trajectory, self.noise, self.anchors
        checks = [
            (t.cell_size > 0, "terrain.cell_size must be positive"),
            (t.roughness >= 0, "terrain.roughness must be non-negative"),
            (t.wavelength > 0, "terrain.wavelength must be positive"),
            (t.building_density >= 0, "terrain.building_density must be non-negative"),
            (0 < t.building_size[0] <= t.building_size[1], "terrain.building_size must be (min, max)"),
            (tr.altitude_agl > 0, "trajectory.altitude_agl must be positive"),
            (0 <= tr.altitude_amplitude < tr.altitude_agl, "trajectory.altitude_amplitude must be in [0, altitude_agl)"),
            (tr.altitude_period_s > 0, "trajectory.altitude_period_s must be positive"),
            (tr.speed >= 0, "trajectory.speed must be non-negative"),
            (tr.rate > 0, "trajectory.rate must be positive"),
            (tr.n_frames >= 1, "trajectory.n_frames must be >= 1"),
            (tr.heading_period_s > 0, "trajectory.heading_period_s must be positive"),
            (self.camera.fx > 0 and self.camera.fy > 0, "camera focal lengths must be positive"),
            (len(self.camera.dist) == 4, "camera.dist must have 4 entries"),
            (min(n.sigma_ins_rot_deg, n.sigma_ins_pos, n.sigma_pixel, n.sigma_anchor_xy,
                 n.sigma_anchor_z) >= 0, "noise sigmas must be non-negative"),
            (0 <= n.outlier_fraction <= 1, "noise.outlier_fraction must be in [0, 1]"),
            (a.per_frame > 0, "anchors.per_frame must be positive"),
            (a.max_track_length >= 1, "anchors.max_track_length must be >= 1"),
            (a.ortho_resolution > 0, "anchors.ortho_resolution must be positive"),
            (a.dem_noise_spacing > 0, "anchors.dem_noise_spacing must be positive"),
            (self.vl.n_frames >= 0 and self.vl.matches_per_frame >= 0, "vl sizes must be >= 0"),
            (0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer"),
        ]
        bad = [msg for ok, msg in checks if not ok]
        if bad:
            raise ConfigInvalid("; ".join(bad), "sim." + bad[0].split()[0])

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict, path: str = "sim") -> "SimConfig":
        return _from_dict(cls, obj, path)


def _from_dict(klass, obj, path):
    if not isinstance(obj, dict):
        raise ConfigInvalid("%s: expected a mapping" % path, path)
    names = {f.name: f for f in fields(klass)}
    unknown = sorted(set(obj) - set(names))
    if unknown:
        raise ConfigInvalid("%s: unknown key(s) %s" % (path, ", ".join(unknown)), "%s.%s" % (path, unknown[0]))
    proto = klass()
    kwargs = {}
    for key, val in obj.items():
        cur = getattr(proto, key)
        sub = "%s.%s" % (path, key)
        if is_dataclass(cur):
            kwargs[key] = _from_dict(type(cur), val, sub)
        elif isinstance(cur, tuple):
            if not isinstance(val, (list, tuple)) or len(val) != len(cur):
                raise ConfigInvalid("%s: expected a list of %d numbers" % (sub, len(cur)), sub)
            kwargs[key] = tuple(float(v) for v in val)
        elif cur is None:
            kwargs[key] = tuple(float(v) for v in val) if val is not None else None
        elif isinstance(cur, bool):
            kwargs[key] = bool(val)
        elif isinstance(cur, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigInvalid("%s: expected an integer" % sub, sub)
            kwargs[key] = val
        else:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigInvalid("%s: expected a number" % sub, sub)
            kwargs[key] = float(val)
    return klass(**kwargs)


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


def nadir_mount(cam: CameraTruth) -> Pose:
    """INS (forward-left-up) to camera extrinsic: optical axis down, image top forward."""
    R0 = np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
    dR = quat_to_matrix(quat_exp(np.radians(np.asarray(cam.boresight_deg, dtype=float))))
    return Pose.from_rt(R0 @ dR, cam.lever_arm)


def true_intrinsics(cam: CameraTruth) -> Intrinsics:
    return Intrinsics(cam.fx, cam.fy, cam.cx, cam.cy, *cam.dist, width=cam.width, height=cam.height)


@dataclass
class World:
    dem: ElevationGrid  # true heights (float32 values)
    base: ElevationGrid  # terrain without buildings, used for AGL
    landmarks: np.ndarray  # (N, 3)


@dataclass
class GroundTruthBundle:
    K: Intrinsics
    T: Pose
    frames: np.ndarray
    ins_poses: list  # true INS poses
    vl_frames: np.ndarray
    vl_poses: list
    world: World
    anchor_truth: dict  # anchor id -> true world point
    outlier_ids: set

    def camera_poses(self):
        return [compose(P, self.T) for P in self.ins_poses]

    def to_json(self) -> dict:
        return {
            "intrinsics": self.K.to_json(),
            "extrinsics": self.T.to_json(),
            "ins_poses": [{"t": int(t), **P.to_json()} for t, P in zip(self.frames, self.ins_poses)],
            "vl_poses": [{"t": int(t), **P.to_json()} for t, P in zip(self.vl_frames, self.vl_poses)],
            "anchors": [[int(j), *[float(v) for v in X]] for j, X in sorted(self.anchor_truth.items())],
            "outliers": sorted(int(j) for j in self.outlier_ids),
        }


def _streams(seed: int):
    names = ("terrain", "landmarks", "ins", "pixels", "anchors", "vl", "dem")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def _path(cfg: SimConfig, n: int):
    """Horizontal positions (n, 2) and heading (n,) sampled at the frame rate."""
    tr = cfg.trajectory
    dt = 1.0 / tr.rate
    t = np.arange(n) * dt
    h0 = math.radians(tr.heading_deg)
    A = math.radians(tr.heading_amplitude_deg)
    w = 2 * math.pi / tr.heading_period_s
    heading = h0 + A * np.sin(w * t)
    # integrate with midpoint headings
    hm = h0 + A * np.sin(w * (t[:-1] + 0.5 * dt))
    steps = tr.speed * dt * np.column_stack([np.cos(hm), np.sin(hm)])
    xy = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    return xy, heading, t


def _footprint_radius(cfg: SimConfig) -> float:
    c = cfg.camera
    half = math.hypot(c.width / 2 / c.fx, c.height / 2 / c.fy)
    relief = cfg.terrain.roughness + 1.5 * cfg.terrain.building_height
    return (cfg.trajectory.altitude_agl + cfg.trajectory.altitude_amplitude + relief) * half * 1.1 + 5.0


def _total_frames(cfg: SimConfig) -> int:
    return cfg.trajectory.n_frames + cfg.vl.n_frames


def world_extent(cfg: SimConfig):
    if cfg.terrain.extent is not None:
        return tuple(float(v) for v in cfg.terrain.extent)
    xy, _, _ = _path(cfg, _total_frames(cfg))
    r = _footprint_radius(cfg) + cfg.terrain.margin
    cs = cfg.terrain.cell_size
    xmin = math.floor((xy[:, 0].min() - r) / cs) * cs
    ymin = math.floor((xy[:, 1].min() - r) / cs) * cs
    xmax = math.ceil((xy[:, 0].max() + r) / cs) * cs
    ymax = math.ceil((xy[:, 1].max() + r) / cs) * cs
    return xmin, xmax, ymin, ymax


def _value_noise(rng, xs, ys, wavelength, octaves=3):
    out = np.zeros((len(ys), len(xs)))
    amp, lam, norm = 1.0, wavelength, 0.0
    for _ in range(octaves):
        gx = np.arange(xs[0] - 2 * lam, xs[-1] + 3 * lam, lam)
        gy = np.arange(ys[0] - 2 * lam, ys[-1] + 3 * lam, lam)
        vals = rng.uniform(-1.0, 1.0, size=(len(gx), len(gy)))
        spline = RectBivariateSpline(gx, gy, vals, kx=3, ky=3)
        out += amp * spline(xs, ys).T
        norm += amp
        amp *= 0.5
        lam *= 0.5
    return out / norm


def generate_world(cfg: SimConfig, rng=None) -> World:
    """Terrain DEM (smooth value noise plus flat-roofed buildings) and a landmark field."""
    cfg.validate()
    streams = _streams(cfg.seed)
    rng = rng or streams["terrain"]
    t = cfg.terrain
    xmin, xmax, ymin, ymax = world_extent(cfg)
    cs = t.cell_size
    xs = xmin + cs * np.arange(int(round((xmax - xmin) / cs)) + 1)
    ys = ymin + cs * np.arange(int(round((ymax - ymin) / cs)) + 1)
    base = np.full((len(ys), len(xs)), float(t.base_height))
    if t.roughness > 0:
        base += t.roughness * _value_noise(rng, xs, ys, t.wavelength)
    heights = base.copy()
    area_km2 = (xmax - xmin) * (ymax - ymin) / 1e6
    n_build = int(rng.poisson(t.building_density * area_km2)) if t.building_density > 0 else 0
    for _ in range(n_build):
        w, d = rng.uniform(t.building_size[0], t.building_size[1], size=2)
        cx = rng.uniform(xmin, xmax)
        cy = rng.uniform(ymin, ymax)
        h = t.building_height * rng.uniform(0.5, 1.5)
        c0, c1 = np.searchsorted(xs, [cx - w / 2, cx + w / 2])
        r0, r1 = np.searchsorted(ys, [cy - d / 2, cy + d / 2])
        if c1 <= c0 or r1 <= r0:
            continue
        roof = base[r0:r1, c0:c1].max() + h
        heights[r0:r1, c0:c1] = np.maximum(heights[r0:r1, c0:c1], roof)
    heights = heights.astype(np.float32).astype(float)
    base = base.astype(np.float32).astype(float)
    origin = (float(xs[0]), float(ys[0]))
    dem = ElevationGrid(origin, cs, heights, sigma_z=cfg.noise.sigma_anchor_z)
    base_grid = ElevationGrid(origin, cs, base, sigma_z=cfg.noise.sigma_anchor_z)

    lrng = streams["landmarks"]
    c = cfg.camera
    alt = cfg.trajectory.altitude_agl
    footprint = (2 * alt * c.width / 2 / c.fx) * (2 * alt * c.height / 2 / c.fy)
    density = cfg.anchors.per_frame / footprint
    n_lm = int(lrng.poisson(density * (xmax - xmin) * (ymax - ymin)))
    lx = lrng.uniform(xmin, xmax, n_lm)
    ly = lrng.uniform(ymin, ymax, n_lm)
    lz = _bilinear(dem, lx, ly)
    return World(dem, base_grid, np.column_stack([lx, ly, lz]))


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(np.shape(a) + (3, 3))
    R[..., 0, 0], R[..., 0, 1], R[..., 1, 0], R[..., 1, 1], R[..., 2, 2] = c, -s, s, c, 1.0
    return R


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(np.shape(a) + (3, 3))
    R[..., 0, 0], R[..., 0, 2], R[..., 2, 0], R[..., 2, 2], R[..., 1, 1] = c, s, -s, c, 1.0
    return R


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(np.shape(a) + (3, 3))
    R[..., 1, 1], R[..., 1, 2], R[..., 2, 1], R[..., 2, 2], R[..., 0, 0] = c, -s, s, c, 1.0
    return R


def generate_trajectory(cfg: SimConfig, world: World, n: int | None = None):
    """True INS poses (body FLU -> ENU world) at constant height above the bare terrain."""
    tr = cfg.trajectory
    n = _total_frames(cfg) if n is None else n
    xy, heading, t = _path(cfg, n)
    if not np.all(world.base.contains(xy[:, 0], xy[:, 1])):
        from .anchors import OutOfBounds

        raise OutOfBounds("trajectory leaves the DEM extent")
    agl = tr.altitude_agl + tr.altitude_amplitude * np.sin(2 * math.pi * t / tr.altitude_period_s)
    z = _bilinear(world.base, xy[:, 0], xy[:, 1]) + agl
    roll = math.radians(tr.roll_amplitude_deg) * np.sin(2 * math.pi * t / 23.0 + 0.3)
    pitch = math.radians(tr.pitch_amplitude_deg) * np.sin(2 * math.pi * t / 31.0 + 1.1)
    R = _rot_z(heading) @ _rot_y(pitch) @ _rot_x(roll)
    q = matrix_to_quat(R)
    pos = np.column_stack([xy, z])
    return [Pose(Rotation(q[i]), pos[i]) for i in range(n)]


def perturb_calibration(K: Intrinsics, T: Pose, mag: Perturbation):
    """``K`` plus offsets and ``T * exp(twist)``; deterministic."""
    v = K.as_vector()
    v[0] *= 1.0 + mag.focal_rel
    v[1] *= 1.0 + mag.focal_rel
    v[2] += mag.pp_shift[0]
    v[3] += mag.pp_shift[1]
    v[4:] += np.asarray(mag.dist, dtype=float)
    xi = np.concatenate([np.radians(np.asarray(mag.rot_deg, dtype=float)), np.asarray(mag.trans, dtype=float)])
    return K.with_vector(v), compose(T, se3_exp(xi))


def _project_truth(K: Intrinsics, C: Pose, X):
    """Pixels and visibility mask (inside the image, in front of the camera)."""
    from .camera import project_points

    uv, valid = project_points(K, C, X)
    inside = valid & (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
    return uv, inside


def _noisy_dem(world: World, cfg: SimConfig, rng) -> ElevationGrid:
    """True heights plus spatially correlated errors.

    Errors are iid on a coarse lattice (spacing ``dem_noise_spacing``) with
    standard deviation ``1.5 * sigma_z`` and bilinearly interpolated, so a
    bilinear sample at a random location has variance ``sigma_z**2`` on average.
    """
    dem = world.dem
    sz = cfg.noise.sigma_anchor_z
    if sz == 0:
        return dem
    sp = cfg.anchors.dem_noise_spacing
    xmin, xmax, ymin, ymax = dem.extent
    nx = int(math.ceil((xmax - xmin) / sp)) + 2
    ny = int(math.ceil((ymax - ymin) / sp)) + 2
    lattice = ElevationGrid((xmin, ymin), sp, rng.normal(0.0, 1.5 * sz, size=(ny, nx)))
    gx, gy = dem.cell_center(*np.meshgrid(np.arange(dem.rows), np.arange(dem.cols), indexing="ij"))
    noise = _bilinear(lattice, gx, gy)
    h = (dem.heights + noise).astype(np.float32).astype(float)
    return ElevationGrid(dem.origin, dem.cell_size, h, sigma_z=sz)


def render_observations(cfg: SimConfig, world: World, ins_true, K: Intrinsics, T: Pose):
    """Noisy sequence, satellite correspondences, held-out VL matches and truth bookkeeping."""
    streams = _streams(cfg.seed)
    nz = cfg.noise
    n_main = cfg.trajectory.n_frames
    cams = [compose(P, T) for P in ins_true]
    L = world.landmarks
    radius = _footprint_radius(cfg)

    # INS measurements: rotation noise on the body side, position noise in world
    irng = streams["ins"]
    s_rot = math.radians(nz.sigma_ins_rot_deg)
    dth = irng.normal(0.0, s_rot, size=(n_main, 3))
    dp = irng.normal(0.0, nz.sigma_ins_pos, size=(n_main, 3))
    ins_meas = []
    for i in range(n_main):
        P = ins_true[i]
        q = quat_multiply(P.rotation.q, quat_exp(dth[i]))
        ins_meas.append(InsPoseMeasurement(i, Pose(Rotation(q), P.translation + dp[i]),
                                           max(s_rot, 1e-9), max(nz.sigma_ins_pos, 1e-9)))

    # visibility per frame
    obs_t, obs_l, obs_uv = [], [], []
    for i in range(n_main):
        c = cams[i].translation
        near = np.flatnonzero(np.hypot(L[:, 0] - c[0], L[:, 1] - c[1]) < radius)
        uv, vis = _project_truth(K, cams[i], L[near])
        obs_t.append(np.full(int(vis.sum()), i, dtype=np.int64))
        obs_l.append(near[vis])
        obs_uv.append(uv[vis])
    obs_t = np.concatenate(obs_t) if obs_t else np.zeros(0, dtype=np.int64)
    obs_l = np.concatenate(obs_l) if obs_l else np.zeros(0, dtype=np.int64)
    obs_uv = np.concatenate(obs_uv) if obs_uv else np.zeros((0, 2))

    # tracks: consecutive sightings of a landmark, split every max_track_length frames
    order = np.lexsort((obs_t, obs_l))
    lt, ll = obs_t[order], obs_l[order]
    new = np.ones(len(order), dtype=bool)
    new[1:] = (ll[1:] != ll[:-1]) | (lt[1:] != lt[:-1] + 1)
    run = np.cumsum(new) - 1
    run_start = np.flatnonzero(new)
    pos_in_run = np.arange(len(order)) - run_start[run]
    seg_new = new | (pos_in_run % cfg.anchors.max_track_length == 0)
    seg_sorted = np.cumsum(seg_new) - 1
    seg = np.empty(len(order), dtype=np.int64)
    seg[order] = seg_sorted
    n_seg = int(seg_sorted[-1]) + 1 if len(order) else 0
    seg_landmark = np.zeros(n_seg, dtype=np.int64)
    seg_landmark[seg_sorted] = ll

    prng = streams["pixels"]
    uv_noisy = obs_uv + prng.normal(0.0, nz.sigma_pixel, size=obs_uv.shape)

    # satellite pixels: one per track segment, sub-pixel, with optional gross outliers
    arng = streams["anchors"]
    truth_xyz = L[seg_landmark]
    xy = truth_xyz[:, :2] + arng.normal(0.0, nz.sigma_anchor_xy, size=(n_seg, 2))
    n_out = int(round(nz.outlier_fraction * n_seg))
    out_ids = np.sort(arng.choice(n_seg, size=n_out, replace=False)) if n_out else np.zeros(0, dtype=np.int64)
    if n_out:
        r = nz.outlier_radius * np.sqrt(arng.uniform(0.0, 1.0, n_out))
        a = arng.uniform(0.0, 2 * math.pi, n_out)
        xy[out_ids] += np.column_stack([r * np.cos(a), r * np.sin(a)])
    dem = world.dem
    xmin, xmax, ymin, ymax = dem.extent
    res = cfg.anchors.ortho_resolution
    ortho = OrthoMeta((xmin, ymin), res, int(math.floor((xmax - xmin) * res)) + 1,
                      int(math.floor((ymax - ymin) * res)) + 1)
    sat = world_to_sat_pixel(xy, ortho)

    frames = {}
    bounds = np.r_[0, np.cumsum(np.bincount(obs_t, minlength=n_main))]
    for i in range(n_main):
        sl = slice(bounds[i], bounds[i + 1])
        idx = np.arange(sl.start, sl.stop)
        idx = idx[np.argsort(seg[idx], kind="stable")]
        frames[i] = [
            Correspondence(i, int(seg[m]), (float(uv_noisy[m, 0]), float(uv_noisy[m, 1])),
                           (float(sat[seg[m], 0]), float(sat[seg[m], 1])))
            for m in idx
        ]

    noisy_dem = _noisy_dem(world, cfg, streams["dem"])

    # held-out frames for visual localization
    vrng = streams["vl"]
    vl = []
    sig3 = np.array([nz.sigma_anchor_xy, nz.sigma_anchor_xy, nz.sigma_anchor_z])
    for i in range(n_main, len(ins_true)):
        c = cams[i].translation
        near = np.flatnonzero(np.hypot(L[:, 0] - c[0], L[:, 1] - c[1]) < radius)
        uv, vis = _project_truth(K, cams[i], L[near])
        pick = np.flatnonzero(vis)
        if len(pick) > cfg.vl.matches_per_frame:
            pick = np.sort(vrng.choice(pick, size=cfg.vl.matches_per_frame, replace=False))
        X = L[near[pick]] + vrng.normal(0.0, 1.0, size=(len(pick), 3)) * sig3
        u = uv[pick] + vrng.normal(0.0, nz.sigma_pixel, size=(len(pick), 2))
        vl.append(VlFrame(i, X, u))

    anchor_truth = {j: truth_xyz[j] for j in range(n_seg)}
    return ins_meas, frames, noisy_dem, ortho, vl, anchor_truth, set(int(j) for j in out_ids)


def simulate(cfg: SimConfig) -> Dataset:
    """Full synthetic dataset with ground truth attached (``Dataset.truth`` holds the JSON form,
    ``Dataset.bundle`` the in-memory :class:`GroundTruthBundle`)."""
    cfg.validate()
    world = generate_world(cfg)
    ins_true = generate_trajectory(cfg, world)
    K = true_intrinsics(cfg.camera)
    T = nadir_mount(cfg.camera)
    ins, frames, dem, ortho, vl, anchor_truth, outliers = render_observations(cfg, world, ins_true, K, T)
    n_main = cfg.trajectory.n_frames
    bundle = GroundTruthBundle(
        K, T, np.arange(n_main), ins_true[:n_main], np.arange(n_main, len(ins_true)),
        ins_true[n_main:], world, anchor_truth, outliers,
    )
    K0, T0 = perturb_calibration(K, T, cfg.perturbation)
    ds = Dataset(ins, frames, dem, ortho, K0, T0, vl, bundle.to_json())
    ds.bundle = bundle
    return ds
