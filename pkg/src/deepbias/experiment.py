"""Method comparison runs: baseline, bias lock and learned bias factors on one sensor stream."""
from __future__ import annotations

import csv
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .allanvar import ImuCalibration, calibrate
from .biasnet import (
    LSTM_RATE, TRANSFORMER_RATE, LearnedBiasProvider, NormStats, TrainConfig, TrainResult, load_model,
    sequence_from_sim, teacher_variance, train,
)
from .estimator import EstimatorSettings, VioResult, run_vio
from .metrics import InsufficientLengthError, RpeReport, drift_rate, ate, rpe
from .simulator import FaultEvent, NoiseSpec, Scenario, SimData, simulate

METHODS = ("baseline", "bias_lock", "lstm", "transformer")
LEARNED = ("lstm", "transformer")


class CompatibilityWarning(UserWarning):
    pass


# ------------------------------------------------------------ calibration

def static_scenario(imu_identity: int = 0, duration: float = 7200.0, rate: float = 100.0,
                    seed: int = 0, **kw) -> Scenario:
    """Motionless recording of one IMU unit, as used for Allan calibration."""
    return Scenario(motion_profile="stationary", duration=duration, imu_rate=rate, keyframe_rate=1.0,
                    landmark_count=10, imu_identity=imu_identity, seed=seed, **kw)


def calibrate_device(imu_identity: int = 0, duration: float = 7200.0, rate: float = 100.0,
                     seed: int = 0, **kw) -> ImuCalibration:
    data = simulate(static_scenario(imu_identity, duration, rate, seed, **kw))
    cal, _ = calibrate(data.imu.accel, data.imu.gyro, rate)
    return cal


def settings_from_calibration(cal: ImuCalibration, pixel_sigma: float = 0.25, **kw) -> EstimatorSettings:
    """Estimator noise model from an Allan calibration (white density and rate random walk)."""
    ka, kg = cal.walk_sigmas()
    noise = NoiseSpec(float(np.mean(cal.accel.white_density)), float(np.mean(cal.gyro.white_density)),
                      ka, kg, pixel_sigma)
    return EstimatorSettings(pixel_sigma=pixel_sigma, imu_noise=noise, **kw)


# ----------------------------------------------------------------- models

@dataclass
class ModelBundle:
    """One architecture, one network per sensor."""

    arch: str
    accel: tuple
    gyro: tuple
    imu_identity: int | None = None
    profiles: tuple = ()

    def provider(self, data: SimData) -> LearnedBiasProvider:
        return LearnedBiasProvider(data, self.accel, self.gyro)

    def save(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"imu_identity": self.imu_identity, "profiles": list(self.profiles)}
        paths = []
        for sensor, (model, stats) in (("accel", self.accel), ("gyro", self.gyro)):
            p = out / f"{self.arch}_{sensor}.json"
            model.save(p, stats, {**meta, "sensor": sensor})
            paths.append(p)
        return paths

    @classmethod
    def load(cls, path, arch: str | None = None) -> "ModelBundle":
        """``path`` is a directory holding ``<arch>_accel.json`` / ``<arch>_gyro.json``,
        or one of those two files."""
        path = Path(path)
        if path.is_file():
            arch = arch or path.stem.rsplit("_", 1)[0]
            path = path.parent
        if arch is None:
            found = sorted({p.stem.rsplit("_", 1)[0] for p in path.glob("*_accel.json")})
            if len(found) != 1:
                raise FileNotFoundError(f"{path}: expected exactly one model pair, found {found}")
            arch = found[0]
        ma, sa, meta = load_model(path / f"{arch}_accel.json")
        mg, sg, _ = load_model(path / f"{arch}_gyro.json")
        return cls(arch, (ma, sa), (mg, sg), meta.get("imu_identity"), tuple(meta.get("profiles", ())))


def train_bundle(recordings: list[SimData], arch: str, cal: ImuCalibration, config: TrainConfig | None = None,
                 keyframe_dt: float = 0.1) -> tuple[ModelBundle, dict[str, TrainResult]]:
    """Train accel and gyro networks with teacher noise ``K^2 dt`` from the calibration."""
    ka, kg = cal.walk_sigmas()
    cfg = replace(config or TrainConfig(), teacher_accel_var=teacher_variance(ka, keyframe_dt),
                  teacher_gyro_var=teacher_variance(kg, keyframe_dt))
    rate = LSTM_RATE if arch == "lstm" else TRANSFORMER_RATE
    seqs = [sequence_from_sim(d, rate, cfg.w) for d in recordings]
    results = {s: train(seqs, arch, cfg, s, rate) for s in ("accel", "gyro")}
    ids = {d.scenario.imu_identity for d in recordings}
    bundle = ModelBundle(arch, (results["accel"].model, results["accel"].stats),
                         (results["gyro"].model, results["gyro"].stats),
                         ids.pop() if len(ids) == 1 else None,
                         tuple(sorted({d.scenario.motion_profile for d in recordings})))
    return bundle, results


# ---------------------------------------------------------------- results

@dataclass
class MethodResult:
    method: str
    rpe5: RpeReport
    rpe10: RpeReport | None
    ate: float
    drift_rate: float
    bias_rmse_accel: float
    bias_rmse_gyro: float
    gyro_z_fault_rmse: float
    runtime: float
    t: np.ndarray
    bias_error: np.ndarray       # (n, 6) online estimate minus truth at each keyframe

    def row(self) -> dict:
        return {
            "method": self.method,
            "rpe5_mean": self.rpe5.mean, "rpe5_median": self.rpe5.median, "rpe5_rmse": self.rpe5.rmse,
            "rpe5_rot_mean_deg": self.rpe5.rot_mean,
            "rpe10_mean": self.rpe10.mean if self.rpe10 else math.nan,
            "ate": self.ate, "drift_rate": self.drift_rate,
            "bias_rmse_accel": self.bias_rmse_accel, "bias_rmse_gyro": self.bias_rmse_gyro,
            "gyro_z_fault_rmse": self.gyro_z_fault_rmse, "runtime_s": self.runtime,
        }


@dataclass
class ExperimentReport:
    scenario: Scenario
    results: dict[str, MethodResult] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __getitem__(self, method: str) -> MethodResult:
        return self.results[method]

    def improvement(self, method: str, metric: str = "rpe5_mean", reference: str = "baseline") -> float:
        """Relative reduction of ``metric`` against ``reference`` (positive = better)."""
        ref = self.results[reference].row()[metric]
        return (ref - self.results[method].row()[metric]) / ref

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = [r.row() for r in self.results.values()]
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        for m, r in self.results.items():
            with open(out / f"rpe_series_{m}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t_start", "trans_err_m", "rot_err_deg"])
                w.writerows(zip(r.rpe5.t_start, r.rpe5.trans, r.rpe5.rot_deg))
            with open(out / f"bias_error_{m}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "bax", "bay", "baz", "bgx", "bgy", "bgz"])
                w.writerows([[t, *e] for t, e in zip(r.t, r.bias_error)])
        (out / "summary.txt").write_text(self.summary())

    def summary(self) -> str:
        sc = self.scenario
        faults = ", ".join(f"{f.kind} {f.start:g}-{f.start + f.duration:g} s" for f in sc.faults) or "none"
        lines = [
            f"scenario: {sc.motion_profile}, {sc.duration:g} s, seed {sc.seed}, imu {sc.imu_identity}, faults: {faults}",
            "RPE: one segment per keyframe start, ending at the first keyframe >= d metres further along ground truth",
            f"{'method':<12} {'rpe5':>9} {'rpe10':>9} {'ate':>9} {'drift':>9} {'ba_rmse':>9} {'bg_rmse':>9} {'bgz_flt':>9} {'time':>7}",
        ]
        for m, r in self.results.items():
            d = r.row()
            lines.append(f"{m:<12} {d['rpe5_mean']:9.4f} {d['rpe10_mean']:9.4f} {d['ate']:9.4f} "
                         f"{d['drift_rate']:9.5f} {d['bias_rmse_accel']:9.5f} {d['bias_rmse_gyro']:9.6f} "
                         f"{d['gyro_z_fault_rmse']:9.6f} {d['runtime_s']:6.1f}s")
        for m in self.results:
            if m != "baseline" and "baseline" in self.results:
                lines.append(f"{m}: 5 m RPE change vs baseline {-100 * self.improvement(m):+.1f}%")
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


def evaluate(result: VioResult, data: SimData, method: str = "") -> MethodResult:
    tr = data.trajectory
    kf = data.vision.keyframe_imu_index
    idx = kf[result.keyframe]
    gt = (tr.t[idx], tr.R[idx], tr.p[idx])
    est = (result.t, result.R, result.p)
    dt = 0.5 / data.scenario.keyframe_rate
    r5 = rpe(est, gt, 5.0, dt)
    try:
        r10 = rpe(est, gt, 10.0, dt)
    except InsufficientLengthError:
        r10 = None
    err = np.hstack([result.online_ba - data.bias.accel[kf], result.online_bg - data.bias.gyro[kf]])
    t = data.vision.keyframe_times
    dist = np.zeros(len(t), bool)
    for f in data.scenario.faults:
        if f.kind == "distortion":
            dist |= f.active(t)
    return MethodResult(
        method, r5, r10, ate(est, gt, dt), drift_rate(est, gt, dt),
        float(np.sqrt(np.mean(err[:, :3] ** 2))), float(np.sqrt(np.mean(err[:, 3:] ** 2))),
        float(np.sqrt(np.mean(err[dist, 5] ** 2))) if dist.any() else math.nan,
        result.runtime, t, err)


def lock_windows(scenario: Scenario) -> list[tuple[float, float]]:
    return [(f.start, f.start + f.duration) for f in scenario.faults if f.kind == "blackout"]


def run_method(method: str, data: SimData, settings: EstimatorSettings, models: dict | None = None,
               max_iterations: int | None = None) -> MethodResult:
    provider = None
    locks = ()
    if method in LEARNED:
        bundle = (models or {}).get(method)
        if bundle is None:
            raise ValueError(f"method {method!r} needs a trained model")
        provider = bundle.provider(data)
    elif method == "bias_lock":
        locks = lock_windows(data.scenario)
    elif method != "baseline":
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    t0 = time.perf_counter()
    res = run_vio(data, settings, provider, lock_windows=locks, max_iterations=max_iterations)
    out = evaluate(res, data, method)
    out.runtime = time.perf_counter() - t0
    return out


def run_experiment(scenario: Scenario, methods=METHODS, models: dict | None = None,
                   settings: EstimatorSettings | None = None, out_dir=None, data: SimData | None = None,
                   workers: int | None = None, max_iterations: int | None = None) -> ExperimentReport:
    """Run every method on one simulated sensor stream.

    A model whose IMU identity differs from the scenario's triggers a
    :class:`CompatibilityWarning`; the run still proceeds.
    """
    data = data or simulate(scenario)
    settings = settings or EstimatorSettings()
    report = ExperimentReport(scenario)
    for m in methods:
        bundle = (models or {}).get(m)
        if m in LEARNED and bundle is not None and bundle.imu_identity not in (None, scenario.imu_identity):
            msg = (f"{m} model was trained on IMU {bundle.imu_identity}, "
                   f"scenario uses IMU {scenario.imu_identity}")
            warnings.warn(msg, CompatibilityWarning, stacklevel=2)
            report.warnings.append(msg)
    workers = workers or min(len(methods), os.cpu_count() or 1)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            futs = {m: pool.submit(run_method, m, data, settings, models, max_iterations) for m in methods}
            report.results = {m: f.result() for m, f in futs.items()}
    else:
        report.results = {m: run_method(m, data, settings, models, max_iterations) for m in methods}
    if out_dir is not None:
        report.write(out_dir)
    return report


def seed_means(reports: list[ExperimentReport], metric: str = "rpe5_mean") -> dict[str, float]:
    methods = list(reports[0].results)
    return {m: float(np.mean([r[m].row()[metric] for r in reports])) for m in methods}


def write_aggregate(reports: list[ExperimentReport], path) -> None:
    """One row per (scenario, seed, method) for the ``report`` subcommand and plotting."""
    with open(path, "w", newline="") as fh:
        w = None
        for rep in reports:
            for r in rep.results.values():
                row = {"profile": rep.scenario.motion_profile, "seed": rep.scenario.seed,
                       "faults": ";".join(f.kind for f in rep.scenario.faults) or "none", **r.row()}
                if w is None:
                    w = csv.DictWriter(fh, fieldnames=list(row))
                    w.writeheader()
                w.writerow(row)
