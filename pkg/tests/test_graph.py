import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anchorcal import graph
from anchorcal.camera import Intrinsics, project_points
from anchorcal.geometry import Pose, Rotation, compose, se3_exp, so3_exp
from anchorcal.graph import (
    STAGE_MASKS,
    Factors,
    GraphState,
    InsPoseMeasurement,
    Mask,
    NoActiveVariables,
    PriorBudget,
    RobustKernel,
    SolverOptions,
    StageConfig,
    anchor_prior_residual,
    build_graph,
    camera_pose_prior,
    evaluate,
    huber_rho,
    huber_weight,
    linearize,
    median_reprojection,
    pose_prior_residual,
    reprojection_residual,
    retract,
    solve_lm,
    staged_optimize,
    total_cost,
)
from anchorcal.pipeline import RefineConfig, prepare_anchors
from anchorcal.synth import Perturbation, simulate

from conftest import small_config

K0 = Intrinsics(1000.0, 1000.0, 800.0, 550.0, -0.05, 0.01, 1e-4, -1e-4)
ZERO = PriorBudget(0.0, 0.0, 0.0, 0.0)
NADIR = np.diag([1.0, -1.0, -1.0])


# ---------------------------------------------------------------- residuals


def test_camera_pose_prior_examples():
    P = Pose(so3_exp([0.1, 0.2, 0.3]), np.array([1.0, 2, 3]))
    m = InsPoseMeasurement(0, P, 1e-9, 0.05)
    C, s = camera_pose_prior(m, Pose.identity(), ZERO)
    assert np.allclose(C.as_matrix(), P.as_matrix())
    assert s[3:] == pytest.approx([0.05] * 3)
    _, s = camera_pose_prior(InsPoseMeasurement(0, P, 1e-9, 0.03), Pose.identity(), PriorBudget(0, 0.04, 0, 0))
    assert s[3] == pytest.approx(0.05)


def test_pose_prior_residual_examples():
    P = Pose(so3_exp([0.1, -0.2, 0.3]), np.array([4.0, 5, 6]))
    assert np.allclose(pose_prior_residual(P, P), 0, atol=1e-15)
    yaw = Pose(so3_exp([0, 0, math.radians(1)]) * P.rotation, P.translation)
    assert np.allclose(pose_prior_residual(yaw, P), [0, 0, 0.017453292519943295, 0, 0, 0], atol=1e-12)
    shifted = Pose(P.rotation, P.translation - [1.0, 0, 0])
    assert np.allclose(pose_prior_residual(P, shifted), [0, 0, 0, 1, 0, 0], atol=1e-15)


def test_anchor_prior_residual_examples(rng):
    X = rng.normal(size=3)
    assert np.array_equal(anchor_prior_residual(X, X), np.zeros(3))
    assert np.array_equal(anchor_prior_residual([0, 0, 1], [0, 0, 0]), [0, 0, 1])
    Y = rng.normal(size=3)
    assert np.array_equal(anchor_prior_residual(X, Y), X - Y)


def test_reprojection_residual_examples():
    C = Pose(Rotation.from_matrix(NADIR), np.array([0.0, 0, 300]))
    X = np.array([10.0, -20, 0])
    u = project_points(K0, C, X)[0][0]
    assert np.allclose(reprojection_residual(K0, C, X, u), 0, atol=1e-12)
    # move X so the prediction shifts by +2 px in u (pinhole, camera x = world x)
    Kp = Intrinsics(1000.0, 1000.0, 800.0, 550.0)
    u = project_points(Kp, C, X)[0][0]
    r = reprojection_residual(Kp, C, X + [2 * 300 / 1000, 0, 0], u)
    assert np.allclose(r, [-2, 0], atol=1e-9)


def test_reprojection_rms_matches_pixel_noise():
    ds = simulate(small_config(seed=5, n_frames=20, noiseless=True, sigma_pixel=0.5, vl_frames=0))
    anchors, _ = prepare_anchors(ds, RefineConfig())
    st_, f = build_graph(ds.ins, anchors, ds.K_init, ds.T_init)
    res = evaluate(st_, f).rep.res
    assert math.sqrt(np.mean(np.sum(res**2, axis=1)) / 2) == pytest.approx(0.5, rel=0.05)


# ---------------------------------------------------------------- robust cost


def test_huber_knee_continuity():
    d = 1.345
    s = np.array([d * d * (1 - 1e-12), d * d, d * d * (1 + 1e-12)])
    assert np.ptp(huber_rho(s, d)) < 1e-10
    assert np.ptp(huber_weight(s, d)) < 1e-10
    # derivative continuity: slope from both sides agrees
    h = 1e-7
    left = (huber_rho(d * d, d) - huber_rho(d * d - h, d)) / h
    right = (huber_rho(d * d + h, d) - huber_rho(d * d, d)) / h
    assert left == pytest.approx(right, rel=1e-5)


def test_huber_linear_growth():
    d = 1.0
    r = 3.0
    assert huber_rho((2 * r) ** 2, d) < 2 * huber_rho(r * r, d) * 2  # far below quadratic growth (x4)
    assert huber_rho((2 * r) ** 2, d) - huber_rho(r * r, d) == pytest.approx(2 * d * r)


@given(st.floats(0, 1e6), st.floats(0.1, 10))
def test_huber_bounded_by_quadratic(s, d):
    assert huber_rho(s, d) <= s + 1e-9
    assert 0 < huber_weight(s, d) <= 1


def _one_pose_graph(kernel):
    """Prior at identity; state chosen so each residual component equals its sigma."""
    sig_rot, sig_pos = 0.01, 0.1
    q = so3_exp([-sig_rot] * 3).q  # Log(q_hat q^-1) = (sig_rot,) * 3
    st_ = GraphState(np.array([0]), q[None], np.full((1, 3), -sig_pos), np.zeros(0, dtype=np.int64),
                     np.zeros((0, 3)), K0.as_vector())
    f = Factors(Rotation.identity().q[None], np.zeros((1, 3)), np.array([sig_rot]), np.array([sig_pos]),
                np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                np.zeros((0, 2)), pose_kernel=kernel)
    return st_, f


def test_cost_six_for_one_sigma_pose_residual():
    st_, f = _one_pose_graph(RobustKernel(3.0))  # knee above sqrt(6)
    assert total_cost(st_, f) == pytest.approx(6.0, rel=1e-12)
    # the default knee (1.345 < sqrt(6)) puts the same factor on the linear branch
    f.pose_kernel = RobustKernel()
    d = 1.345
    assert total_cost(st_, f) == pytest.approx(2 * d * math.sqrt(6) - d * d, rel=1e-12)


def test_noiseless_truth_costs_zero(noiseless_ds):
    anchors, _ = prepare_anchors(noiseless_ds, RefineConfig())
    st_, f = build_graph(noiseless_ds.ins, anchors, noiseless_ds.K_init, noiseless_ds.T_init)
    assert total_cost(st_, f) < 1e-18


# ---------------------------------------------------------------- gradient


def test_gradient_matches_finite_differences():
    ds = simulate(small_config(seed=3, n_frames=5, perturb=Perturbation.degraded(), vl_frames=0))
    anchors, _ = prepare_anchors(ds, RefineConfig())
    st_, f = build_graph(ds.ins, anchors[:20], ds.K_init, ds.T_init)
    f.rep_kernel = RobustKernel(1.0)
    rng = np.random.default_rng(0)
    st_.points += rng.normal(0, 0.5, st_.points.shape)
    st_.trans += rng.normal(0, 0.3, st_.trans.shape)
    m = Mask.all()
    lin = linearize(st_, f, m)

    def fd(kind, i, j, h):
        dp, dl, dk = np.zeros((len(st_.frames), 6)), np.zeros((len(st_.points), 3)), np.zeros(8)
        d = {"p": dp, "l": dl, "k": dk}[kind]
        idx = j if kind == "k" else (i, j)
        d[idx] = h
        cp = total_cost(retract(st_, m, dp, dl, dk), f)
        d[idx] = -h
        cm = total_cost(retract(st_, m, dp, dl, dk), f)
        return (cp - cm) / (2 * h)

    worst = 0.0
    for i in range(len(st_.frames)):
        for j in range(6):
            worst = max(worst, abs(2 * lin.gp[i, j] - fd("p", i, j, 1e-6)) / max(abs(fd("p", i, j, 1e-6)), 1e-3))
    for i in range(len(st_.points)):
        for j in range(3):
            n = fd("l", i, j, 1e-6)
            worst = max(worst, abs(2 * lin.gl[i, j] - n) / max(abs(n), 1e-3))
    for j in range(8):
        n = fd("k", 0, j, 1e-6 * max(1.0, abs(st_.intrinsics[j])))
        worst = max(worst, abs(2 * lin.gk[j] - n) / max(abs(n), 1e-3))
    assert worst < 1e-5


# ---------------------------------------------------------------- solver


def _priors_only(rng, n_frames=4, n_lm=5):
    pq = np.array([so3_exp(rng.normal(0, 0.5, 3)).q for _ in range(n_frames)])
    pt = rng.normal(0, 10, (n_frames, 3))
    X = rng.normal(0, 10, (n_lm, 3))
    f = Factors(pq, pt, rng.uniform(0.01, 0.1, n_frames), rng.uniform(0.1, 1, n_frames), X,
                rng.uniform(0.1, 1, (n_lm, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                np.zeros((0, 2)), pose_kernel=RobustKernel(1e6), anchor_kernel=RobustKernel(1e6))
    q0 = np.array([so3_exp(rng.normal(0, 0.2, 3)).q for _ in range(n_frames)])
    q0 = np.array([(Rotation(a) * Rotation(b)).q for a, b in zip(pq, q0)])
    st_ = GraphState(np.arange(n_frames), q0, pt + rng.normal(0, 2, pt.shape), np.arange(n_lm),
                     X + rng.normal(0, 2, X.shape), K0.as_vector())
    return st_, f


def test_prior_only_matches_closed_form(rng):
    # each variable carries exactly one prior, so the weighted-LS minimizer is the prior itself
    st_, f = _priors_only(rng)
    mask = Mask(True, True, True, True)
    out, rep = solve_lm(st_, f, mask, SolverOptions(max_iterations=100))
    qa = out.quats * np.sign(out.quats[:, :1])
    qb = f.prior_quats * np.sign(f.prior_quats[:, :1])
    assert np.max(np.abs(qa - qb)) < 1e-9
    assert np.max(np.abs(out.trans - f.prior_trans)) < 1e-9
    assert np.max(np.abs(out.points - f.anchor_prior)) < 1e-9
    assert rep.converged


def _triangulation():
    X = np.array([12.0, -7.0, 3.0])
    cams = [Pose(Rotation.from_matrix(NADIR), np.array([x, y, 250.0])) for x, y in [(-60, 0), (0, 40), (70, -20)]]
    uv = np.array([project_points(K0, C, X)[0][0] for C in cams])
    st_ = GraphState(np.arange(3), np.array([C.rotation.q for C in cams]), np.array([C.translation for C in cams]),
                     np.array([0]), (X + [3.0, -2.0, 5.0])[None], K0.as_vector())
    f = Factors(st_.quats.copy(), st_.trans.copy(), np.full(3, 0.01), np.full(3, 0.1), (X + [3.0, -2.0, 5.0])[None],
                np.full((1, 3), 1e6), np.arange(3), np.zeros(3, dtype=np.int64), uv)
    return X, st_, f


def test_triangulation_landmark_only():
    X, st_, f = _triangulation()
    out, _ = solve_lm(st_, f, STAGE_MASKS["landmarks"], SolverOptions(max_iterations=100))
    assert np.linalg.norm(out.points[0] - X) < 1e-6


def test_optimal_state_is_fixed_point():
    X, st_, f = _triangulation()
    st_.points[0] = X
    f.anchor_prior[0] = X
    out, rep = solve_lm(st_, f, Mask.all())
    assert rep.iterations <= 1
    assert rep.step_norm == 0 or rep.step_norm < 1e-12
    assert np.max(np.abs(out.points - X)) < 1e-9


@pytest.mark.parametrize("stage", sorted(STAGE_MASKS))
def test_masked_blocks_bit_identical(stage, noisy_ds):
    anchors, _ = prepare_anchors(noisy_ds, RefineConfig())
    st_, f = build_graph(noisy_ds.ins, anchors, noisy_ds.K_init, noisy_ds.T_init)
    mask = STAGE_MASKS[stage]
    out, rep = solve_lm(st_, f, mask, SolverOptions(max_iterations=3))
    assert rep.final_cost <= rep.initial_cost
    if not mask.pose_rot:
        assert np.array_equal(out.quats, st_.quats)
    if not mask.pose_trans:
        assert np.array_equal(out.trans, st_.trans)
    if not mask.landmark_xy:
        assert np.array_equal(out.points[:, :2], st_.points[:, :2])
    if not mask.landmark_z:
        assert np.array_equal(out.points[:, 2], st_.points[:, 2])
    off = ~mask.intrinsics_vector()
    assert np.array_equal(out.intrinsics[off], st_.intrinsics[off])


def test_no_active_variables(noisy_ds):
    st_, f = build_graph(noisy_ds.ins, [], noisy_ds.K_init, noisy_ds.T_init)
    with pytest.raises(NoActiveVariables):
        solve_lm(st_, f, Mask())
    with pytest.raises(NoActiveVariables):
        solve_lm(st_, f, STAGE_MASKS["intrinsics"])


def test_banded_and_sparse_paths_agree(noisy_ds, monkeypatch):
    anchors, _ = prepare_anchors(noisy_ds, RefineConfig())
    st_, f = build_graph(noisy_ds.ins, anchors, noisy_ds.K_init, noisy_ds.T_init)
    lin = linearize(st_, f, Mask.all())
    a = graph.solve_step(lin, f, Mask.all(), 1e-3)
    monkeypatch.setattr(graph, "USE_BANDED", False)
    b = graph.solve_step(lin, f, Mask.all(), 1e-3)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-6, atol=1e-9 * np.max(np.abs(y)))


# ---------------------------------------------------------------- staging


def test_noiseless_staged_run_is_noop(noiseless_ds):
    anchors, _ = prepare_anchors(noiseless_ds, RefineConfig())
    st_, f = build_graph(noiseless_ds.ins, anchors, noiseless_ds.K_init, noiseless_ds.T_init)
    out, reports = staged_optimize(st_, f)
    assert [r.stage for r in reports] == ["rotations", "translations", "landmarks_xy", "intrinsics", "joint"]
    assert np.max(np.abs(out.trans - st_.trans)) < 1e-9
    assert np.max(np.abs(out.quats - st_.quats)) < 1e-9
    assert np.max(np.abs(out.points - st_.points)) < 1e-9
    assert np.max(np.abs(out.intrinsics - st_.intrinsics)) < 1e-9


def test_stage_one_fixes_boresight_error():
    pert = Perturbation(rot_deg=(0.0, 0.0, 2.0))
    ds = simulate(small_config(seed=8, n_frames=40, perturb=pert, vl_frames=0))
    anchors, _ = prepare_anchors(ds, RefineConfig())
    st_, f = build_graph(ds.ins, anchors, ds.K_init, ds.T_init)
    before = median_reprojection(st_, f)
    out, reports = staged_optimize(st_, f, StageConfig(schedule=("rotations",)))
    assert before / reports[0].median_reprojection >= 10


def test_stages_never_increase_cost(noisy_ds):
    anchors, _ = prepare_anchors(noisy_ds, RefineConfig())
    st_, f = build_graph(noisy_ds.ins, anchors, noisy_ds.K_init, noisy_ds.T_init)
    c0 = total_cost(st_, f)
    _, reports = staged_optimize(st_, f)
    costs = [c0] + [r.cost_after for r in reports]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(costs, costs[1:]))
    assert reports[-1].cost_after <= reports[-2].cost_after


def test_ablation_schedules():
    assert StageConfig(ablations={"cam_opt_joint"}).effective_schedule() == ["poses", "landmarks_xy", "intrinsics", "joint"]
    assert StageConfig(ablations={"no_fine_adjust"}).effective_schedule()[-1] == "intrinsics"
    with pytest.raises(ValueError):
        StageConfig(ablations={"bogus"})
