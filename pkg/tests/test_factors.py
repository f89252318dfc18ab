import numpy as np
import pytest

from deepbias.camera import CameraRig, CheiralityError, StereoObservation
from deepbias.factors import (
    AssociationError, BiasEstimate, ConfigurationError, associate, dcs_cost, dcs_scale,
    deep_bias_residual, prior_residual, stereo_residual, stereo_residuals,
)
from deepbias.liealg import Pose3, Rot3, so3_exp, so3_log
from deepbias.simulator import BiasDynamics, NoiseSpec, Scenario, simulate

from helpers import numerical_jacobian, rel_error


def _pose_and_landmark(rng, rig):
    pose = Pose3(Rot3.exp(rng.normal(size=3)), rng.normal(size=3))
    Xc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 12)])
    Xb = rig.R_bc @ Xc + rig.t_bc
    return pose, pose.transform_from(Xb)


def test_noiseless_observation_gives_zero_and_pixel_shift_is_linear():
    rig = CameraRig()
    rng = np.random.default_rng(0)
    pose, m = _pose_and_landmark(rng, rig)
    uv = rig.project(rig.world_to_camera(pose.R, pose.t, m[None]))[0]
    r, _, _ = stereo_residual(pose, m, StereoObservation(0, 0, *uv), rig)
    np.testing.assert_allclose(r, 0.0, atol=1e-12)
    r, _, _ = stereo_residual(pose, m, StereoObservation(0, 0, uv[0] + 1.0, uv[1], uv[2]), rig)
    np.testing.assert_allclose(r, [-1.0, 0.0, 0.0], atol=1e-12)


def test_landmark_behind_camera_raises():
    rig = CameraRig()
    pose = Pose3()
    with pytest.raises(CheiralityError):
        stereo_residual(pose, np.array([-3.0, 0.0, 0.0]), StereoObservation(0, 0, 0, 0, 0), rig)


def test_stereo_jacobians_100_points():
    rig = CameraRig()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        pose, m = _pose_and_landmark(rng, rig)
        obs = StereoObservation(0, 0, *rng.uniform(0, 400, 3))
        _, Jp, Jl = stereo_residual(pose, m, obs, rig)

        def f(x):
            return stereo_residual(x, m, obs, rig)[0]
        num = numerical_jacobian(f, pose, lambda P, d: Pose3(Rot3(P.R @ so3_exp(d[:3])), P.t + d[3:]), 6)
        worst = max(worst, rel_error(num, Jp))
        num = numerical_jacobian(lambda x: stereo_residual(pose, x, obs, rig)[0], m, lambda x, d: x + d, 3)
        worst = max(worst, rel_error(num, Jl))
    assert worst < 1e-5


def test_batched_residuals_agree_with_single():
    rig = CameraRig()
    rng = np.random.default_rng(2)
    poses, ms, obs = zip(*[(*_pose_and_landmark(rng, rig), rng.uniform(0, 400, 3)) for _ in range(10)])
    R = np.stack([p.R for p in poses])
    p = np.stack([q.t for q in poses])
    r, Jr, Jp, Jl, valid = stereo_residuals(rig, R, p, np.stack(ms), np.stack(obs))
    assert valid.all()
    for k in range(10):
        r1, J1, Jl1 = stereo_residual(poses[k], ms[k], StereoObservation(0, 0, *obs[k]), rig)
        np.testing.assert_allclose(r[k], r1)
        np.testing.assert_allclose(np.hstack([Jr[k], Jp[k]]), J1)


def test_noiseless_simulated_observations_reproject_exactly():
    sc = Scenario(duration=3.0, noise=NoiseSpec(pixel_sigma=0.0), bias=BiasDynamics())
    data = simulate(sc)
    vis, tr = data.vision, data.trajectory
    idx = vis.keyframe_imu_index[vis.keyframe]
    r, *_, valid = stereo_residuals(sc.camera, tr.R[idx], tr.p[idx], data.landmarks[vis.landmark_id], vis.uv)
    assert valid.all() and len(r) > 100
    assert np.abs(r).max() < 1e-9


def test_dcs_examples_and_monotonicity():
    phi = 1.0
    assert dcs_scale(0.0, phi) == 1.0
    assert dcs_scale(phi, phi) == 1.0
    assert dcs_scale(3 * phi, phi) == pytest.approx(0.5)
    x = np.linspace(0, 50, 1000)
    s = dcs_scale(x, 2.0)
    assert np.all(np.diff(s) <= 0) and np.all(s[x <= 2.0] == 1.0)


def test_dcs_cost_derivative_is_squared_scale():
    phi = 1.5
    x = np.linspace(0.1, 30, 200)
    h = 1e-6
    deriv = (dcs_cost(x + h, phi) - dcs_cost(x - h, phi)) / (2 * h)
    np.testing.assert_allclose(deriv, dcs_scale(x, phi) ** 2, rtol=1e-6, atol=1e-8)


def test_deep_bias_residual_weights():
    est = BiasEstimate(1.0, np.zeros(3), np.zeros(3))
    ra, rg = deep_bias_residual(np.zeros(3), np.array([0.0, 0.0, 1.0]), est)
    np.testing.assert_array_equal(ra, 0.0)
    assert rg[2] == pytest.approx(1.0 / np.sqrt(2.5e-5)) == pytest.approx(200.0)
    ra, rg = deep_bias_residual(est.accel_bias_hat, est.gyro_bias_hat, est)
    assert not ra.any() and not rg.any()


def test_bias_estimate_association():
    kt = np.arange(10) * 0.1
    assert associate(BiasEstimate(0.3, np.zeros(3), np.zeros(3)), kt) == 3
    with pytest.raises(AssociationError):
        associate(BiasEstimate(0.35, np.zeros(3), np.zeros(3)), kt)


def _state(rng):
    return (so3_exp(rng.normal(size=3)), rng.normal(size=3), rng.normal(size=3),
            rng.normal(size=3), rng.normal(size=3))


def _retract(s, d):
    R, p, v, ba, bg = s
    return (R @ so3_exp(d[0:3]), p + d[6:9], v + d[3:6], ba + d[9:12], bg + d[12:15])


def test_prior_examples():
    rng = np.random.default_rng(3)
    s = _state(rng)
    r, _ = prior_residual(s, s, np.eye(15))
    np.testing.assert_array_equal(r, 0.0)
    R, p, v, ba, bg = s
    r, _ = prior_residual((R, p + [0.2, 0, 0], v, ba, bg), s, np.eye(15) * 0.04)
    assert np.linalg.norm(r) == pytest.approx(1.0)
    dR = so3_exp([0.0, 0.1, 0.0])
    r, _ = prior_residual((R @ dR, p, v, ba, bg), s, np.eye(15))
    np.testing.assert_allclose(r[:3], so3_log(dR), atol=1e-15)


def test_prior_rejects_bad_covariance():
    s = _state(np.random.default_rng(4))
    bad = np.eye(15)
    bad[0, 0] = -1.0
    with pytest.raises(ConfigurationError):
        prior_residual(s, s, bad)


def test_prior_jacobian_100_points():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        s, mean = _state(rng), _state(rng)
        A = rng.normal(size=(15, 15))
        cov = A @ A.T + np.eye(15)
        _, J = prior_residual(s, mean, cov)
        num = numerical_jacobian(lambda x: prior_residual(x, mean, cov)[0], s, _retract, 15)
        worst = max(worst, rel_error(num, J))
    assert worst < 1e-5
