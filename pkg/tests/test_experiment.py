import csv
import warnings

import numpy as np
import pytest

from deepbias.biasnet import LSTM_RATE, NormStats, build_model, sequence_from_sim
from deepbias.estimator import EstimatorSettings
from deepbias.experiment import (
    CompatibilityWarning, ModelBundle, evaluate, lock_windows, run_experiment, run_method,
)
from deepbias.simulator import FaultEvent, Scenario, simulate


def short(**kw):
    base = dict(duration=12.0, landmark_count=120, seed=3)
    base.update(kw)
    return Scenario(**base)


@pytest.fixture(scope="module")
def data():
    return simulate(short(faults=[FaultEvent("blackout", 6.0, 1.0)]))


@pytest.fixture(scope="module")
def bundle(data):
    seq = sequence_from_sim(data, LSTM_RATE)
    sa = NormStats.fit(seq.windows, seq.prev[:, :3], seq.target[:, :3])
    sg = NormStats.fit(seq.windows, seq.prev[:, 3:], seq.target[:, 3:])
    ma, mg = build_model("lstm", hidden=8, seed=0), build_model("lstm", hidden=8, seed=1)
    return ModelBundle("lstm", (ma, sa), (mg, sg), imu_identity=0, profiles=("handheld_walk",))


def test_lock_windows_only_blackouts():
    sc = short(faults=[FaultEvent("blackout", 2.0, 1.5), FaultEvent("distortion", 5.0, 2.0)])
    assert lock_windows(sc) == [(2.0, 3.5)]


def test_baseline_metrics_shapes(data):
    r = run_method("baseline", data, EstimatorSettings(), max_iterations=3)
    n = len(data.vision.keyframe_times)
    assert r.bias_error.shape == (n, 6)
    assert np.isfinite(r.rpe5.mean) and r.ate >= 0
    assert np.isnan(r.gyro_z_fault_rmse)       # no distortion in this scenario


def test_unknown_method_and_missing_model(data):
    with pytest.raises(ValueError):
        run_method("kalman", data, EstimatorSettings())
    with pytest.raises(ValueError):
        run_method("lstm", data, EstimatorSettings())


def test_report_files_and_threads(tmp_path, data, bundle):
    rep = run_experiment(data.scenario, ("baseline", "bias_lock", "lstm"), {"lstm": bundle},
                         data=data, out_dir=tmp_path, workers=3, max_iterations=3)
    for name in ("report.csv", "summary.txt", "rpe_series_lstm.csv", "bias_error_bias_lock.csv"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["baseline", "bias_lock", "lstm"]
    assert "blackout 6-7 s" in (tmp_path / "summary.txt").read_text()
    # threaded and serial runs agree exactly
    serial = run_experiment(data.scenario, ("baseline", "lstm"), {"lstm": bundle}, data=data,
                            workers=1, max_iterations=3)
    assert serial["baseline"].rpe5.mean == rep["baseline"].rpe5.mean
    assert serial["lstm"].ate == rep["lstm"].ate


def test_identity_mismatch_warns(data, bundle):
    other = ModelBundle("lstm", bundle.accel, bundle.gyro, imu_identity=7)
    with pytest.warns(CompatibilityWarning, match="IMU 7"):
        rep = run_experiment(data.scenario, ("lstm",), {"lstm": other}, data=data, max_iterations=2)
    assert rep.warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error", CompatibilityWarning)
        run_experiment(data.scenario, ("lstm",), {"lstm": bundle}, data=data, max_iterations=2)


def test_bundle_roundtrip(tmp_path, bundle, data):
    bundle.save(tmp_path)
    back = ModelBundle.load(tmp_path)
    assert back.arch == "lstm" and back.imu_identity == 0 and back.profiles == ("handheld_walk",)
    a = run_method("lstm", data, EstimatorSettings(), {"lstm": bundle}, max_iterations=2)
    b = run_method("lstm", data, EstimatorSettings(), {"lstm": back}, max_iterations=2)
    np.testing.assert_array_equal(a.bias_error, b.bias_error)


def test_distortion_window_rmse():
    d = simulate(short(faults=[FaultEvent("distortion", 4.0, 3.0)]))
    r = run_method("baseline", d, EstimatorSettings(), max_iterations=2)
    t = d.vision.keyframe_times
    sel = (t >= 4.0) & (t < 7.0)
    assert r.gyro_z_fault_rmse == pytest.approx(np.sqrt(np.mean(r.bias_error[sel, 5] ** 2)))


def test_evaluate_matches_truth_when_exact(data):
    from deepbias.estimator import run_vio
    res = run_vio(data, EstimatorSettings(), max_iterations=3)
    kf = data.vision.keyframe_imu_index
    res.online_ba = data.bias.accel[kf].copy()
    res.online_bg = data.bias.gyro[kf].copy()
    m = evaluate(res, data)
    assert m.bias_rmse_accel == 0.0 and m.bias_rmse_gyro == 0.0
