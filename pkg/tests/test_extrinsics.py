import math

import numpy as np
import pytest

from anchorcal.camera import NoConvergence
from anchorcal.extrinsics import (
    ExtrinsicOptions,
    InsufficientFrames,
    refine_extrinsics,
    relative_discrepancy,
)
from anchorcal.geometry import Pose, Rotation, compose, inverse, relative_angle, se3_exp, so3_exp
from anchorcal.graph import RobustKernel

T_TRUE = Pose(so3_exp([math.pi, 0.01, -0.02]), np.array([0.25, -0.1, -0.35]))


def ins_track(rng, n):
    return [Pose(so3_exp(rng.normal(0, 0.4, 3)), rng.normal(0, 300, 3)) for _ in range(n)]


def cams_for(ins, T, rng=None, sr=0.0, sp=0.0):
    out = []
    for P in ins:
        C = compose(P, T)
        if rng is not None:
            C = compose(C, se3_exp(np.concatenate([rng.normal(0, sr, 3), rng.normal(0, sp, 3)])))
        out.append(C)
    return out


def errors(T, ref=T_TRUE):
    return math.degrees(relative_angle(T.rotation, ref.rotation)), float(np.linalg.norm(T.translation - ref.translation))


def test_discrepancy_examples(rng):
    P = ins_track(rng, 1)[0]
    assert np.allclose(relative_discrepancy(compose(P, T_TRUE), P, T_TRUE), 0, atol=1e-12)
    xi = rng.normal(size=6)
    xi *= 1e-4 / np.linalg.norm(xi)
    d = relative_discrepancy(compose(P, T_TRUE), P, compose(T_TRUE, se3_exp(xi)))
    assert np.linalg.norm(d) == pytest.approx(1e-4, rel=1e-3)
    t = np.array([0.3, -0.2, 1.0])
    d = relative_discrepancy(Pose.identity(), Pose.identity(), Pose(Rotation.identity(), t))
    assert np.allclose(d, [0, 0, 0, *t], atol=1e-15)


def test_truth_init_is_returned(rng):
    ins = ins_track(rng, 30)
    est = refine_extrinsics(cams_for(ins, T_TRUE), ins, T_TRUE)
    assert max(errors(est.T_opt)) < 1e-12
    assert np.max(est.residual_norms) < 1e-9


def test_noiseless_recovery_from_degraded_init(rng):
    ins = ins_track(rng, 50)
    T0 = compose(T_TRUE, se3_exp([0, 0, math.radians(2), 0.1, 0, 0]))
    est = refine_extrinsics(cams_for(ins, T_TRUE), ins, T0)
    r, t = errors(est.T_opt)
    assert math.radians(r) < 1e-8 and t < 1e-8
    assert est.final_cost <= est.initial_cost


def test_noise_averages_out():
    # 20 Monte-Carlo seeds, 1500 frames each; 95th percentile of the errors
    rot, trans = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        ins = ins_track(rng, 1500)
        cams = cams_for(ins, T_TRUE, rng, math.radians(0.1), 0.05)
        T0 = compose(T_TRUE, se3_exp([0, 0, math.radians(2), 0.1, 0, 0]))
        r, t = errors(refine_extrinsics(cams, ins, T0).T_opt)
        rot.append(r)
        trans.append(t)
    assert np.percentile(rot, 95) < 0.02
    assert np.percentile(trans, 95) < 0.01


def test_gross_outliers_are_downweighted(rng):
    ins = ins_track(rng, 300)
    cams = cams_for(ins, T_TRUE, rng, math.radians(0.05), 0.02)
    for i in range(0, 300, 10):  # 10% frames with 5 m / 3 deg blunders
        cams[i] = compose(cams[i], se3_exp([0, math.radians(3), 0, 5.0, -4.0, 2.0]))
    T0 = compose(T_TRUE, se3_exp([0, 0, math.radians(2), 0.1, 0, 0]))
    robust = refine_extrinsics(cams, ins, T0, RobustKernel(0.5))
    plain = refine_extrinsics(cams, ins, T0, RobustKernel(1e6))
    # each blunder pulls with clipped force delta: bias <= n_out * delta / n_in (+ small noise slack)
    assert errors(robust.T_opt)[1] <= 1.1 * 30 * 0.5 / 270
    assert errors(robust.T_opt)[1] < errors(plain.T_opt)[1] / 5
    assert robust.inliers >= 270


def test_world_frame_equivariance(rng):
    ins = ins_track(rng, 40)
    cams = cams_for(ins, T_TRUE, rng, 0.002, 0.05)
    T0 = compose(T_TRUE, se3_exp([0.01, 0, 0.03, 0.1, 0, 0]))
    G = Pose(so3_exp([0.3, -0.2, 1.0]), np.array([1000.0, -50, 20]))
    a = refine_extrinsics(cams, ins, T0).T_opt
    b = refine_extrinsics([compose(G, C) for C in cams], [compose(G, P) for P in ins], T0).T_opt
    assert np.allclose(a.as_matrix(), b.as_matrix(), atol=1e-7)


def test_insufficient_frames(rng):
    ins = ins_track(rng, 2)
    with pytest.raises(InsufficientFrames):
        refine_extrinsics(cams_for(ins, T_TRUE), ins, T_TRUE)


def test_iteration_cap_reports_best(rng):
    ins = ins_track(rng, 20)
    cams = cams_for(ins, T_TRUE, rng, 0.01, 0.1)
    T0 = compose(T_TRUE, se3_exp([0, 0, 0.3, 1.0, 0, 0]))
    with pytest.raises(NoConvergence) as exc:
        refine_extrinsics(cams, ins, T0, opts=ExtrinsicOptions(max_iterations=1))
    assert exc.value.best.final_cost <= exc.value.best.initial_cost
