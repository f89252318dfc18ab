import numpy as np
import pytest

from deepbias.liealg import rot_z, so3_exp
from deepbias.simulator import (
    GRAVITY, AlignmentError, BiasDynamics, BiasSeries, ConfigError, FaultEvent,
    NoiseSpec, Scenario, gen_bias_truth, gen_trajectory, load_scenario,
    read_imu_csv, save_scenario, simulate, synth_imu, synth_vision,
    trajectory_from_functions, write_csvs,
)

QUIET = NoiseSpec(0.0, 0.0, 0.0, 0.0, 0.0)


def test_unknown_profile_is_a_config_error():
    with pytest.raises(ConfigError):
        Scenario(motion_profile="hovercraft")
    with pytest.raises(ConfigError):
        Scenario(duration=0.0)
    with pytest.raises(ConfigError):
        NoiseSpec(accel_white_sigma=-1.0)


def test_stationary_profile_has_constant_pose():
    tr = gen_trajectory(Scenario(motion_profile="stationary", duration=5.0))
    np.testing.assert_allclose(tr.v_world, 0.0, atol=1e-15)
    np.testing.assert_allclose(tr.p - tr.p[0], 0.0, atol=1e-15)
    np.testing.assert_allclose(tr.R - tr.R[0], 0.0, atol=1e-15)
    np.testing.assert_allclose(tr.angvel_body, 0.0, atol=1e-15)


@pytest.mark.parametrize("profile", ["handheld_walk", "drone"])
def test_velocity_matches_central_differences(profile):
    tr = gen_trajectory(Scenario(motion_profile=profile, duration=20.0, imu_rate=200.0))
    dt = tr.t[1] - tr.t[0]
    fd = (tr.p[2:] - tr.p[:-2]) / (2 * dt)
    assert np.abs(fd - tr.v_world[1:-1]).max() < 1e-3


def test_derivatives_consistent_at_1khz():
    tr = gen_trajectory(Scenario(motion_profile="quadruped_trot", duration=5.0, imu_rate=1000.0,
                                 keyframe_rate=10.0))
    dt = 1e-3
    fd = (tr.p[2:] - tr.p[:-2]) / (2 * dt)
    assert np.abs(fd - tr.v_world[1:-1]).max() < 1e-4


def test_trot_vertical_acceleration_peaks_between_3_and_4_hz():
    tr = gen_trajectory(Scenario(motion_profile="quadruped_trot", duration=60.0))
    az = tr.accel_world[:, 2] - tr.accel_world[:, 2].mean()
    spec = np.abs(np.fft.rfft(az))
    freqs = np.fft.rfftfreq(len(az), d=tr.t[1] - tr.t[0])
    peak = freqs[np.argmax(spec[1:]) + 1]
    assert 3.0 <= peak <= 4.0


def test_handheld_gait_near_2_hz():
    tr = gen_trajectory(Scenario(motion_profile="handheld_walk", duration=60.0))
    az = tr.accel_world[:, 2] - tr.accel_world[:, 2].mean()
    spec = np.abs(np.fft.rfft(az))
    freqs = np.fft.rfftfreq(len(az), d=tr.t[1] - tr.t[0])
    assert freqs[np.argmax(spec[1:]) + 1] == pytest.approx(2.0, abs=0.1)


def test_zero_bias_configuration_gives_zero_bias():
    sc = Scenario(duration=10.0, noise=QUIET, bias=BiasDynamics())
    b = gen_bias_truth(sc)
    assert np.all(b.accel == 0.0) and np.all(b.gyro == 0.0)


def test_random_walk_variance_grows_linearly():
    sigma, T = 1e-3, 20.0
    noise = NoiseSpec(0.0, 0.0, sigma, sigma, 0.0)
    finals = np.array([
        gen_bias_truth(Scenario(duration=T, imu_rate=100.0, noise=noise,
                                bias=BiasDynamics(), seed=s)).accel[-1]
        for s in range(100)
    ])
    var = finals.var(axis=0, ddof=1).mean()    # 300 samples pooled over axes
    assert var == pytest.approx(sigma ** 2 * T, rel=0.2)


def test_walk_steps_have_no_jumps():
    sc = Scenario(duration=30.0)
    b = gen_bias_truth(sc)
    dt = 1.0 / sc.imu_rate
    steps = np.abs(np.diff(b.accel, axis=0))
    # deterministic part contributes far less than one walk sigma per step
    assert steps.max() < 5 * sc.noise.accel_walk_sigma * np.sqrt(dt) + 1e-6


def test_warmup_reaches_95_percent_after_three_time_constants():
    A, tau = 0.02, 300.0
    dyn = BiasDynamics(accel_warmup=[A, 0.0, 0.0], warmup_tau=tau)
    sc = Scenario(duration=3 * tau, imu_rate=10.0, keyframe_rate=1.0, noise=QUIET, bias=dyn)
    b = gen_bias_truth(sc)
    assert b.accel[-1, 0] == pytest.approx(A * (1 - np.exp(-3.0)), rel=1e-12)
    assert b.accel[-1, 0] == pytest.approx(0.95 * A, rel=0.01)


def test_identity_constants_shared_across_profiles_and_seeds():
    a = Scenario(motion_profile="handheld_walk", imu_identity=3, seed=1).bias_dynamics
    b = Scenario(motion_profile="quadruped_trot", imu_identity=3, seed=9).bias_dynamics
    c = Scenario(imu_identity=4).bias_dynamics
    np.testing.assert_array_equal(a.accel_warmup, b.accel_warmup)
    assert not np.allclose(a.accel_warmup, c.accel_warmup)
    assert np.all(a.sin_period >= 200.0)


def _static(n=50, rate=100.0):
    t = np.arange(n) / rate
    return trajectory_from_functions(t, lambda t: (0.0 * t, 0.0 * t, 0.0 * t),
                                     lambda t: (0.0 * t, 0.0 * t, 0.0 * t))


def _zero_bias(tr, ba=(0.0, 0.0, 0.0)):
    n = len(tr.t)
    return BiasSeries(tr.t.copy(), np.tile(ba, (n, 1)), np.zeros((n, 3)))


def test_imu_at_rest_measures_gravity_reaction():
    tr = _static()
    imu = synth_imu(tr, _zero_bias(tr), QUIET, seed=0)
    np.testing.assert_allclose(imu.accel, np.tile([0.0, 0.0, 9.80665], (len(tr), 1)), atol=1e-12)
    np.testing.assert_allclose(imu.gyro, 0.0, atol=1e-15)


def test_accel_bias_is_additive():
    tr = _static()
    imu = synth_imu(tr, _zero_bias(tr, (0.1, 0.0, 0.0)), QUIET, seed=0)
    np.testing.assert_allclose(imu.accel[7], [0.1, 0.0, 9.80665], atol=1e-12)


def test_constant_rate_about_z():
    w = 0.7
    t = np.arange(400) / 200.0
    tr = trajectory_from_functions(t, lambda t: (0.0 * t, 0.0 * t, 0.0 * t),
                                   lambda t: (w * t, 0.0 * t, 0.0 * t))
    imu = synth_imu(tr, _zero_bias(tr), QUIET, seed=0)
    np.testing.assert_allclose(imu.gyro, np.tile([0.0, 0.0, w], (len(t), 1)), atol=1e-12)
    # orientation oracle
    np.testing.assert_allclose(tr.R[-1], rot_z(w * t[-1]), atol=1e-12)


def test_grid_mismatch_raises():
    tr = _static()
    b = _zero_bias(_static(n=40))
    with pytest.raises(AlignmentError):
        synth_imu(tr, b, QUIET, seed=0)


def test_naive_integration_at_1khz_reproduces_trajectory():
    sc = Scenario(motion_profile="handheld_walk", duration=10.0, imu_rate=1000.0,
                  noise=QUIET, bias=BiasDynamics())
    tr = gen_trajectory(sc)
    imu = synth_imu(tr, gen_bias_truth(sc), QUIET, sc.seed)
    dt = 1e-3
    R, v, p = tr.R[0].copy(), tr.v_world[0].copy(), tr.p[0].copy()
    for k in range(len(tr) - 1):
        a = R @ imu.accel[k] + GRAVITY
        p = p + v * dt + 0.5 * a * dt * dt
        v = v + a * dt
        R = R @ so3_exp(imu.gyro[k] * dt)
    assert np.linalg.norm(p - tr.p[-1]) < 1e-3


def test_straight_ahead_landmark_disparity():
    # base at x = -0.05 so the left camera centre sits at the world origin
    tr = trajectory_from_functions(np.arange(5) / 20.0,
                                   lambda t: (0.0 * t - 0.05, 0.0 * t, 0.0 * t),
                                   lambda t: (0.0 * t, 0.0 * t, 0.0 * t))
    sc = Scenario(motion_profile="stationary", duration=0.2, imu_rate=20.0, keyframe_rate=10.0,
                  noise=QUIET, landmark_map=np.array([[5.0, 0.0, 0.0]]))
    vis = synth_vision(tr, sc)
    d = 5.0
    rig = sc.camera
    assert len(vis) == 3
    np.testing.assert_allclose(vis.uv[:, 0] - vis.uv[:, 1], rig.f * rig.baseline / d, atol=1e-12)
    np.testing.assert_allclose(vis.uv[:, 2], rig.cy, atol=1e-12)
    np.testing.assert_allclose(vis.uv[:, 0], rig.cx, atol=1e-12)


def test_landmark_behind_camera_is_dropped():
    tr = _static(n=11, rate=100.0)
    sc = Scenario(motion_profile="stationary", duration=0.1, imu_rate=100.0, keyframe_rate=10.0,
                  noise=QUIET, landmark_map=np.array([[-5.0, 0.0, 0.0], [4.0, 0.2, 0.1]]))
    vis = synth_vision(tr, sc)
    assert set(vis.landmark_id.tolist()) == {1}
    assert np.all(vis.uv[:, 0] > vis.uv[:, 1])


def test_blackout_and_distortion_faults():
    base = Scenario(duration=20.0, seed=5)
    clean = simulate(base)
    faults = [FaultEvent("blackout", 5.0, 3.0), FaultEvent("distortion", 12.0, 4.0)]
    sc = Scenario(duration=20.0, seed=5, faults=faults)
    faulty = simulate(sc)
    kt = faulty.vision.keyframe_times
    in_black = np.where((kt >= 5.0) & (kt < 8.0))[0]
    assert len(in_black) == 30
    assert not np.isin(faulty.vision.keyframe, in_black).any()
    # distortion shifts uL and uR by exactly 10 px; v untouched
    k = int(np.where(kt >= 13.0)[0][0])
    ids_c, uv_c = clean.vision.for_keyframe(k)
    ids_f, uv_f = faulty.vision.for_keyframe(k)
    common, ic, jf = np.intersect1d(ids_c, ids_f, return_indices=True)
    assert len(common) > 5
    np.testing.assert_allclose(uv_c[ic, :2] - uv_f[jf, :2], 10.0, atol=1e-9)
    np.testing.assert_array_equal(uv_c[ic, 2], uv_f[jf, 2])


def test_observations_stay_inside_image():
    d = simulate(Scenario(duration=10.0, motion_profile="drone"))
    rig = d.scenario.camera
    uv = d.vision.uv
    assert np.all((uv[:, :2] >= 0) & (uv[:, :2] < rig.width))
    assert np.all((uv[:, 2] >= 0) & (uv[:, 2] < rig.height))


def test_determinism_is_bitwise():
    a = simulate(Scenario(duration=5.0, seed=42, motion_profile="quadruped_trot"))
    b = simulate(Scenario(duration=5.0, seed=42, motion_profile="quadruped_trot"))
    for x, y in [(a.imu.accel, b.imu.accel), (a.imu.gyro, b.imu.gyro), (a.bias.accel, b.bias.accel),
                 (a.vision.uv, b.vision.uv), (a.trajectory.p, b.trajectory.p), (a.landmarks, b.landmarks)]:
        assert np.array_equal(x, y)
    c = simulate(Scenario(duration=5.0, seed=43, motion_profile="quadruped_trot"))
    assert not np.array_equal(a.imu.accel, c.imu.accel)


def test_scenario_file_round_trip_and_csv_export(tmp_path):
    sc = Scenario(duration=2.0, motion_profile="drone", seed=3,
                  faults=[FaultEvent("blackout", 0.5, 0.5)])
    save_scenario(sc, tmp_path / "s.yaml")
    again = load_scenario(tmp_path / "s.yaml")
    assert again.to_dict() == sc.to_dict()
    data = simulate(again)
    write_csvs(data, tmp_path / "out")
    imu = read_imu_csv(tmp_path / "out" / "imu.csv")
    np.testing.assert_array_equal(imu.accel, data.imu.accel)
    header = (tmp_path / "out" / "obs.csv").read_text().splitlines()[0]
    assert header == "keyframe,landmark_id,uL,uR,v"
    gt = np.loadtxt(tmp_path / "out" / "gt.csv", delimiter=",", skiprows=1)
    assert gt.shape == (len(data.trajectory), 17)


def test_unknown_scenario_key_rejected(tmp_path):
    (tmp_path / "bad.yaml").write_text("motion_profile: drone\nwarp_speed: 9\n")
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "bad.yaml")
