import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepbias.liealg import (
    Pose3, Rot3, normalize_rotation, orthonormality_defect, skew, so3_exp,
    so3_log, so3_right_jacobian, so3_right_jacobian_inv, matrix_to_quat,
    quat_to_matrix,
)


def expm_series(A, terms=20):
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


def test_exp_zero_is_identity():
    np.testing.assert_array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_about_x_matches_power_series():
    phi = np.array([np.pi / 2, 0.0, 0.0])
    R = so3_exp(phi)
    oracle = expm_series(skew(phi), terms=20)
    np.testing.assert_allclose(R, oracle, atol=1e-9)
    np.testing.assert_allclose(R[:, 1], [0.0, 0.0, 1.0], atol=1e-12)


def test_full_turn_is_identity():
    axis = np.array([1.0, -2.0, 0.5])
    phi = 2 * np.pi * axis / np.linalg.norm(axis)
    np.testing.assert_allclose(so3_exp(phi), np.eye(3), atol=1e-9)


def test_exp_rejects_nonfinite():
    with pytest.raises(ValueError):
        so3_exp([np.nan, 0.0, 0.0])


def test_small_angle_branch_is_second_order():
    phi = np.array([3e-9, -1e-9, 2e-9])
    np.testing.assert_allclose(so3_exp(phi), expm_series(skew(phi)), atol=1e-15)


def test_log_identity_and_round_trip():
    np.testing.assert_array_equal(so3_log(np.eye(3)), np.zeros(3))
    phi = np.array([0.1, 0.2, 0.3])
    np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-9)


def test_log_at_pi_about_z_matches_brute_force_axis_search():
    R = np.diag([-1.0, -1.0, 1.0])
    out = so3_log(R)
    # oracle: scan a sphere of axis candidates for the one whose pi-rotation reproduces R
    best, best_err = None, np.inf
    for th in np.linspace(0, np.pi, 61):
        for ph in np.linspace(0, 2 * np.pi, 121):
            a = np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
            err = np.abs(expm_series(skew(np.pi * a), 40) - R).max()
            if err < best_err:
                best, best_err = a, err
    assert best_err < 1e-6
    assert np.linalg.norm(out) == pytest.approx(np.pi, abs=1e-12)
    assert abs(abs(out @ best) - np.pi) < 1e-6
    np.testing.assert_allclose(np.abs(out), [0.0, 0.0, np.pi], atol=1e-9)


def test_log_near_pi_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        phi = (np.pi - rng.uniform(1e-9, 1e-5)) * a
        np.testing.assert_allclose(so3_exp(so3_log(so3_exp(phi))), so3_exp(phi), atol=1e-9)


def test_exp_log_round_trip_10k():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10_000):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        phi = rng.uniform(1e-6, np.pi - 1e-3) * a
        worst = max(worst, np.linalg.norm(so3_log(so3_exp(phi)) - phi))
    assert worst < 1e-9


def test_right_jacobian_zero_and_inverse():
    np.testing.assert_array_equal(so3_right_jacobian(np.zeros(3)), np.eye(3))
    rng = np.random.default_rng(2)
    for _ in range(50):
        phi = rng.normal(size=3)
        np.testing.assert_allclose(so3_right_jacobian(phi) @ so3_right_jacobian_inv(phi),
                                   np.eye(3), atol=1e-9)


@pytest.mark.parametrize("phi", [[0.3, 0.0, 0.0], [0.2, -0.4, 1.1], [1e-7, 0.0, 2e-7]])
def test_right_jacobian_defining_property(phi):
    phi = np.asarray(phi)
    Jr = so3_right_jacobian(phi)
    R = so3_exp(phi)
    eps = 1e-6
    for k in range(3):
        d = np.zeros(3)
        d[k] = eps
        lhs = so3_log(R.T @ so3_exp(phi + d))
        np.testing.assert_allclose(lhs, Jr @ d, atol=1e-8)


def test_skew_examples():
    np.testing.assert_array_equal(skew([1, 0, 0]), [[0, 0, 0], [0, 0, -1], [0, 1, 0]])
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, b = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_allclose(skew(a) @ a, 0.0, atol=1e-15)
        np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-14)
        np.testing.assert_allclose(skew(a) @ b, -skew(b) @ a, atol=1e-14)
        S = skew(a)
        np.testing.assert_array_equal(S, -S.T)


def test_orthonormality_under_compositions():
    rng = np.random.default_rng(4)
    R = Rot3.identity()
    for _ in range(10_000):
        R = R @ Rot3.exp(rng.normal(scale=0.5, size=3))
    assert orthonormality_defect(R.m) <= 1e-9
    assert np.linalg.det(R.m) == pytest.approx(1.0, abs=1e-9)


def test_normalize_rotation_fixes_drift():
    R = so3_exp([0.3, 0.1, -0.2]) + 1e-6 * np.random.default_rng(5).normal(size=(3, 3))
    Rn = normalize_rotation(R)
    assert orthonormality_defect(Rn) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_pose_group_axioms(r1, t1, r2, t2):
    A = Pose3(Rot3.exp(r1), np.array(t1))
    B = Pose3(Rot3.exp(r2), np.array(t2))
    C = Pose3(Rot3.exp(r2[::-1]), np.array(t1[::-1]))
    I = A.inverse() @ A
    np.testing.assert_allclose(I.R, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(I.t, 0.0, atol=1e-9)
    lhs, rhs = (A @ B) @ C, A @ (B @ C)
    np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)


def test_quaternion_round_trip():
    rng = np.random.default_rng(6)
    for _ in range(100):
        R = so3_exp(rng.normal(size=3))
        np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)
