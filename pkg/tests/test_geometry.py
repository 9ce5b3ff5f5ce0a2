import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anchorcal.geometry import (
    Pose,
    Rotation,
    compose,
    inverse,
    quat_exp,
    quat_log,
    relative_angle,
    se3_exp,
    se3_exp_batch,
    se3_left_jacobian,
    se3_log,
    se3_log_batch,
    se3_right_jacobian,
    se3_right_jacobian_inv,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
    transform_point,
)

vec3 = st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=3).map(np.array)
small_rot = vec3.filter(lambda w: np.linalg.norm(w) < math.pi - 0.1)
twists = st.tuples(small_rot, vec3.map(lambda v: 20 * v)).map(np.concatenate)


def random_pose(rng, scale=10.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0, math.pi - 0.1) / np.linalg.norm(w)
    return Pose(so3_exp(w), rng.normal(scale=scale, size=3))


def test_so3_log_identity():
    assert np.array_equal(so3_log(Rotation.identity()), np.zeros(3))


def test_so3_log_quarter_turn_z():
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    assert np.allclose(so3_log(Rotation.from_matrix(R)), [0, 0, math.pi / 2], atol=1e-12)


def test_so3_exp_half_turn_x():
    assert np.allclose(so3_exp([math.pi, 0, 0]).as_matrix(), np.diag([1.0, -1, -1]), atol=1e-12)


def test_so3_exp_small_angle_series():
    w = np.array([3e-5, -6e-5, 7e-5])
    w *= 1e-4 / np.linalg.norm(w)
    err = so3_exp(w).as_matrix() - (np.eye(3) + skew(w))
    assert np.max(np.abs(err)) < 1e-8  # O(|w|^2)


def test_so3_round_trip_1000():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(1000, 3))
    w *= (rng.uniform(0, math.pi - 0.1, 1000) / np.linalg.norm(w, axis=1))[:, None]
    back = quat_log(quat_exp(w))
    assert np.max(np.linalg.norm(back - w, axis=1)) < 1e-10


def test_so3_log_near_pi_is_stable():
    for a in (math.pi - 1e-9, math.pi):
        w = so3_log(so3_exp([0, a, 0]))
        assert abs(np.linalg.norm(w) - a) < 1e-7
        assert np.linalg.norm(w) <= math.pi + 1e-12


def test_se3_log_examples():
    assert np.array_equal(se3_log(Pose.identity()), np.zeros(6))
    xi = se3_log(Pose(Rotation.identity(), np.array([1.0, 2, 3])))
    assert np.allclose(xi, [0, 0, 0, 1, 2, 3], atol=1e-15)


def test_se3_round_trip_1000():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        P = random_pose(rng)
        Q = se3_exp(se3_log(P))
        worst = max(worst, np.max(np.abs(Q.as_matrix() - P.as_matrix())))
    assert worst < 1e-9


def test_se3_batch_matches_scalar(rng):
    xi = np.concatenate([rng.normal(scale=0.8, size=(50, 3)), rng.normal(scale=5, size=(50, 3))], axis=1)
    q, t = se3_exp_batch(xi)
    for i in range(50):
        P = se3_exp(xi[i])
        assert np.allclose(P.rotation.q * np.sign(P.rotation.q[0]), q[i] * np.sign(q[i, 0]), atol=1e-13)
        assert np.allclose(P.translation, t[i], atol=1e-12)
    assert np.allclose(se3_log_batch(q, t), xi, atol=1e-10)


def test_compose_examples(rng):
    P = random_pose(rng)
    assert np.allclose(compose(P, Pose.identity()).as_matrix(), P.as_matrix(), atol=1e-15)
    assert np.allclose(inverse(inverse(P)).as_matrix(), P.as_matrix(), atol=1e-12)
    t = np.array([1.0, -2, 0.5])
    x = np.array([3.0, 4, 5])
    assert np.allclose(transform_point(Pose(Rotation.identity(), t), x), x + t)


@given(twists, twists, twists)
def test_compose_associative(a, b, c):
    A, B, C = se3_exp(a), se3_exp(b), se3_exp(c)
    lhs = compose(compose(A, B), C).as_matrix()
    rhs = compose(A, compose(B, C)).as_matrix()
    assert np.allclose(lhs, rhs, atol=1e-9)


@given(twists, twists, vec3)
def test_transform_point_composes(a, b, x):
    A, B = se3_exp(a), se3_exp(b)
    assert np.allclose(transform_point(compose(A, B), x), transform_point(A, transform_point(B, x)), atol=1e-9)


@given(twists)
def test_exp_log_round_trip_property(xi):
    assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


def test_pose_json_round_trip(rng):
    P = random_pose(rng)
    Q = Pose.from_json(P.to_json())
    assert P.to_json()["q"][0] >= 0
    assert np.allclose(Q.as_matrix(), P.as_matrix(), atol=1e-15)


def test_relative_angle():
    a = so3_exp([0, 0, 0.3])
    b = so3_exp([0, 0, 0.5])
    assert abs(relative_angle(a, b) - 0.2) < 1e-12


def _fd_jacobian(f, x, h=1e-6):
    cols = []
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_so3_right_jacobian_fd(seed):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=3) * rng.uniform(0.01, 2.5) / math.sqrt(3)
    R = so3_exp(phi).as_matrix()
    # exp(phi + d) ~= exp(phi) exp(Jr d)
    num = _fd_jacobian(lambda p: so3_log(Rotation.from_matrix(R.T @ so3_exp(p).as_matrix())), phi)
    assert _rel(so3_right_jacobian(phi), num) < 1e-5
    assert np.allclose(so3_right_jacobian_inv(phi) @ so3_right_jacobian(phi), np.eye(3), atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_se3_jacobians_fd(seed):
    rng = np.random.default_rng(100 + seed)
    xi = np.concatenate([rng.normal(size=3) * 0.7, rng.normal(size=3) * 3])
    T = se3_exp(xi)
    Tinv = inverse(T)
    right = _fd_jacobian(lambda x: se3_log(compose(Tinv, se3_exp(x))), xi)
    left = _fd_jacobian(lambda x: se3_log(compose(se3_exp(x), Tinv)), xi)
    assert _rel(se3_right_jacobian(xi), right) < 1e-5
    assert _rel(se3_left_jacobian(xi), left) < 1e-5
    assert np.allclose(se3_right_jacobian_inv(xi) @ se3_right_jacobian(xi), np.eye(6), atol=1e-9)
