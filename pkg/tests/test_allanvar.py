import numpy as np
import pytest

from deepbias.allanvar import (
    AllanCurve, FitError, ImuCalibration, InsufficientDataError, allan_deviation,
    calibrate, fit_noise_params,
)
from deepbias.simulator import BiasDynamics, NoiseSpec, Scenario, gen_bias_truth, gen_trajectory, synth_imu


def _naive_overlapping_avar(y, m):
    # direct double loop over cluster averages
    ybar = np.array([y[k:k + m].mean() for k in range(len(y) - m + 1)])
    d = ybar[m:] - ybar[:-m]
    return 0.5 * np.mean(d * d)


def test_matches_direct_cluster_average_definition():
    y = np.random.default_rng(0).normal(size=600)
    c = allan_deviation(y, 1.0, [1.0, 3.0, 10.0, 50.0])
    for tau, ad in zip(c.taus, c.adev):
        assert ad ** 2 == pytest.approx(_naive_overlapping_avar(y, int(tau)), rel=1e-10)


def test_constant_signal_has_zero_deviation_and_fails_fit():
    c = allan_deviation(np.full(100_000, 3.7), 100.0)
    np.testing.assert_allclose(c.adev, 0.0, atol=1e-12)
    with pytest.raises(FitError):
        fit_noise_params(c)


def test_too_short_signal_names_required_length():
    with pytest.raises(InsufficientDataError, match="2000"):
        allan_deviation(np.zeros(100), 100.0, [1.0, 10.0])


def test_taus_strictly_increasing():
    with pytest.raises(ValueError):
        AllanCurve(np.array([1.0, 1.0]), np.array([1.0, 1.0]))
    c = allan_deviation(np.random.default_rng(1).normal(size=50_000), 100.0)
    assert np.all(np.diff(c.taus) > 0) and np.all(c.adev > 0)


def test_white_noise_follows_minus_half_slope():
    rate, sigma, T = 100.0, 0.3, 2000.0
    taus = np.logspace(-2, np.log10(T / 20), 30)
    ratios = []
    for seed in range(20):
        y = np.random.default_rng(seed).normal(scale=sigma, size=int(T * rate))
        c = allan_deviation(y, rate, taus)
        ratios.append(c.adev / (sigma / np.sqrt(rate * c.taus)))
    np.testing.assert_allclose(np.mean(ratios, axis=0), 1.0, rtol=0.10)


def test_random_walk_follows_plus_half_slope():
    rate, K, T = 10.0, 0.01, 2000.0
    taus = np.logspace(0, np.log10(T / 20), 15)
    ratios = []
    for seed in range(20):
        steps = np.random.default_rng(seed).normal(scale=K / np.sqrt(rate), size=int(T * rate))
        c = allan_deviation(np.cumsum(steps), rate, taus)
        # discrete walk adds a 1/(m^2) correction at small m; the taus used keep it below 1%
        ratios.append(c.adev / (K * np.sqrt(c.taus / 3.0)))
    np.testing.assert_allclose(np.mean(ratios, axis=0), 1.0, rtol=0.15)


def _static_log(noise, seed, duration=7200.0, rate=100.0):
    sc = Scenario(motion_profile="stationary", duration=duration, imu_rate=rate, keyframe_rate=1.0,
                  noise=noise, bias=BiasDynamics(), seed=seed)
    tr = gen_trajectory(sc)
    return synth_imu(tr, gen_bias_truth(sc), noise, seed)


@pytest.mark.slow
def test_default_noise_spec_minimum_near_100_s():
    imu = _static_log(NoiseSpec(), seed=0)
    c = allan_deviation(imu.accel[:, 0], 100.0)
    tmin = c.taus[np.argmin(c.adev)]
    assert 50.0 <= tmin <= 200.0


def test_white_plus_walk_recovered():
    N, K = 2e-3, 6e-4
    noise = NoiseSpec(N, N / 10, K, K / 10, 0.0)
    imu = _static_log(noise, seed=11, duration=3600.0)
    cal, curves = calibrate(imu.accel, imu.gyro, 100.0)
    np.testing.assert_allclose(cal.accel.white_density, N, rtol=0.15)
    np.testing.assert_allclose(cal.accel.rate_random_walk, K, rtol=0.15)
    np.testing.assert_allclose(cal.gyro.white_density, N / 10, rtol=0.15)
    assert set(curves) == {f"{s}_{a}" for s in ("accel", "gyro") for a in "xyz"}


def test_calibration_file_round_trip(tmp_path):
    imu = _static_log(NoiseSpec(), seed=2, duration=600.0)
    cal, _ = calibrate(imu.accel, imu.gyro, 100.0)
    cal.save(tmp_path / "cal.yaml")
    again = ImuCalibration.load(tmp_path / "cal.yaml")
    np.testing.assert_array_equal(again.gyro.white_density, cal.gyro.white_density)
