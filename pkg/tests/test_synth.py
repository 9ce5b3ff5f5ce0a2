import filecmp
import math
import os

import numpy as np
import pytest

from anchorcal.anchors import sample_elevation
from anchorcal.evaluate import calibration_poses, evaluate_reprojection
from anchorcal.geometry import Pose, compose, inverse, so3_log
from anchorcal.io import save_dataset
from anchorcal.pipeline import RefineConfig, prepare_anchors
from anchorcal.synth import (
    ConfigInvalid,
    Perturbation,
    SimConfig,
    generate_trajectory,
    generate_world,
    nadir_mount,
    perturb_calibration,
    simulate,
    true_intrinsics,
)

from conftest import small_config


def flat_config(**traj):
    cfg = small_config(n_frames=30)
    cfg.terrain.roughness = 0.0
    cfg.terrain.building_density = 0.0
    for k, v in traj.items():
        setattr(cfg.trajectory, k, v)
    return cfg


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    save_dataset(simulate(small_config(seed=4, n_frames=15)), a)
    save_dataset(simulate(small_config(seed=4, n_frames=15)), b)
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b))
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors


def test_different_seeds_differ():
    a = simulate(small_config(seed=1, n_frames=10))
    b = simulate(small_config(seed=2, n_frames=10))
    assert a.ins[0].pose.translation.tolist() != b.ins[0].pose.translation.tolist()


def test_flat_terrain():
    cfg = flat_config()
    w = generate_world(cfg)
    assert np.all(w.dem.heights == cfg.terrain.base_height)


def test_landmarks_lie_on_the_surface():
    cfg = small_config(n_frames=30)
    w = generate_world(cfg)
    L = w.landmarks
    assert np.max(np.abs(sample_elevation(w.dem, L[:, 0], L[:, 1]) - L[:, 2])) < 1e-9


def test_straight_track_geometry():
    cfg = flat_config(heading_amplitude_deg=0.0, speed=50.0, rate=5.0)
    w = generate_world(cfg)
    poses = generate_trajectory(cfg, w, 30)
    p = np.array([P.translation for P in poses])
    steps = np.linalg.norm(np.diff(p[:, :2], axis=0), axis=1)
    assert np.allclose(steps, 10.0, atol=1e-9)
    d = p[:, :2] - p[0, :2]
    cross = d[:, 0] * d[-1, 1] - d[:, 1] * d[-1, 0]
    assert np.max(np.abs(cross)) / np.linalg.norm(d[-1]) < 1e-6
    assert np.ptp(p[:, 2] - cfg.terrain.base_height) < 1e-6
    assert p[0, 2] - cfg.terrain.base_height == pytest.approx(cfg.trajectory.altitude_agl)


def test_perturbation_examples():
    cam = SimConfig().camera
    K, T = true_intrinsics(cam), nadir_mount(cam)
    K1, T1 = perturb_calibration(K, T, Perturbation())
    assert K1 == K and np.allclose(T1.as_matrix(), T.as_matrix(), atol=1e-15)
    K2, _ = perturb_calibration(K, T, Perturbation(focal_rel=0.01))
    assert K2.fx == pytest.approx(1.01 * K.fx) and K2.fy == pytest.approx(1.01 * K.fy)
    _, T3 = perturb_calibration(K, T, Perturbation(rot_deg=(0, 0, 2.0)))
    w = so3_log(T.rotation.inverse() * T3.rotation)
    assert np.allclose(w, [0, 0, 0.0349], atol=1e-4)


def test_frame_count_and_noise_free_reprojection():
    ds = simulate(small_config(seed=6, n_frames=25, noiseless=True))
    assert len(ds.ins) == 25
    anchors, _ = prepare_anchors(ds, RefineConfig())
    b = ds.bundle
    rep = evaluate_reprojection(anchors, calibration_poses([_ins(t, P) for t, P in zip(b.frames, b.ins_poses)], b.T), b.K)
    assert rep.median < 1e-9


def _ins(t, P):
    from anchorcal.graph import InsPoseMeasurement

    return InsPoseMeasurement(int(t), P, 1.0, 1.0)


def test_pixel_noise_only_median():
    # median of a 2-D Gaussian norm is sigma * sqrt(2 ln 2)
    ds = simulate(small_config(seed=7, n_frames=30, noiseless=True, sigma_pixel=0.5))
    anchors, _ = prepare_anchors(ds, RefineConfig())
    b = ds.bundle
    rep = evaluate_reprojection(anchors, calibration_poses(ds.ins, b.T), b.K)
    assert rep.median == pytest.approx(0.5 * math.sqrt(2 * math.log(2)), rel=0.05)


def test_observation_density_in_target_regime(noisy_ds):
    per_frame = [len(c) for c in noisy_ds.correspondences.values()]
    assert 250 <= np.mean(per_frame) <= 330


def test_outlier_fraction():
    ds = simulate(small_config(seed=9, n_frames=30, outlier_fraction=0.1))
    b = ds.bundle
    frac = len(b.outlier_ids) / len(b.anchor_truth)
    assert frac == pytest.approx(0.1, abs=0.02)


def test_truth_bundle_consistency(noisy_ds):
    b = noisy_ds.bundle
    for C, P in zip(b.camera_poses()[:5], b.ins_poses[:5]):
        assert np.allclose(compose(inverse(P), C).as_matrix(), b.T.as_matrix(), atol=1e-9)
    assert noisy_ds.truth["intrinsics"]["fx"] == b.K.fx


def test_config_round_trip_and_validation():
    cfg = SimConfig(seed=3)
    assert SimConfig.from_dict(cfg.as_dict()) == cfg
    with pytest.raises(ConfigInvalid) as e:
        SimConfig.from_dict({"noise": {"sigma_pixle": 1}})
    assert e.value.path == "sim.noise.sigma_pixle"
    with pytest.raises(ConfigInvalid):
        SimConfig.from_dict({"trajectory": {"n_frames": 1.5}})
    bad = SimConfig()
    bad.trajectory.n_frames = 0
    with pytest.raises(ConfigInvalid):
        bad.validate()
