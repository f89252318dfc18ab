"""Overlapping Allan variance and IMU noise-parameter identification."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

# adev minimum of a flicker floor sits at 0.664 * B
FLICKER_FACTOR = 0.664
SLOPE_TOL = 0.15


class InsufficientDataError(ValueError):
    pass


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class AllanCurve:
    taus: np.ndarray
    adev: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.taus) <= 0):
            raise ValueError("taus must be strictly increasing")

    def log_slopes(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.gradient(np.log(self.adev), np.log(self.taus))


@dataclass(frozen=True)
class ImuNoiseParams:
    """Per-axis parameters of one sensor triad (each field has shape (3,))."""

    white_density: np.ndarray
    bias_instability: np.ndarray
    rate_random_walk: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ("white_density", "bias_instability", "rate_random_walk")}

    @classmethod
    def from_dict(cls, d: dict) -> "ImuNoiseParams":
        return cls(*(np.asarray(d[k], float) for k in
                     ("white_density", "bias_instability", "rate_random_walk")))


@dataclass(frozen=True)
class ImuCalibration:
    accel: ImuNoiseParams
    gyro: ImuNoiseParams

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump({"accel": self.accel.to_dict(),
                                              "gyro": self.gyro.to_dict()}, sort_keys=False))

    @classmethod
    def load(cls, path) -> "ImuCalibration":
        d = yaml.safe_load(Path(path).read_text())
        return cls(ImuNoiseParams.from_dict(d["accel"]), ImuNoiseParams.from_dict(d["gyro"]))

    def walk_sigmas(self) -> tuple[float, float]:
        return float(np.mean(self.accel.rate_random_walk)), float(np.mean(self.gyro.rate_random_walk))


def default_taus(duration: float, n: int = 100, tau_min: float = 0.01) -> np.ndarray:
    return np.logspace(np.log10(tau_min), np.log10(duration / 10.0), n)


def allan_deviation(signal, rate: float, taus=None) -> AllanCurve:
    """Overlapping Allan deviation of a uniformly sampled 1-D series.

    Cluster sizes ``m = round(tau * rate)`` are de-duplicated, so the returned
    ``taus`` may be shorter than requested and are the realized ``m / rate``.
    """
    y = np.asarray(signal, dtype=np.float64).ravel()
    n = len(y)
    if taus is None:
        taus = default_taus(n / rate)
    taus = np.asarray(taus, float)
    need = int(np.ceil(2 * taus.max() * rate))
    if n < need:
        raise InsufficientDataError(
            f"signal has {n} samples; tau={taus.max():g}s at {rate:g} Hz needs at least {need}")
    ms = np.unique(np.maximum(1, np.round(taus * rate).astype(np.int64)))
    ms = ms[2 * ms <= n - 1]
    # removing the mean first keeps the running sum small on long records
    S = np.concatenate([[0.0], np.cumsum(y - y.mean())])
    adev = np.empty(len(ms))
    for i, m in enumerate(ms):
        d = S[2 * m:] - 2.0 * S[m:-m] + S[:-2 * m]
        adev[i] = np.sqrt(0.5 * np.mean(d * d)) / m
    return AllanCurve(ms / rate, adev)


def _fixed_slope_fit(curve: AllanCurve, sel: np.ndarray, slope: float, anchor: float) -> float:
    log_t, log_a = np.log(curve.taus[sel]), np.log(curve.adev[sel])
    intercept = np.mean(log_a - slope * log_t)
    return float(np.exp(intercept + slope * np.log(anchor)))


def _longest_run(mask: np.ndarray) -> np.ndarray:
    best, cur_start, best_len = None, None, 0
    for i, m in enumerate(np.append(mask, False)):
        if m and cur_start is None:
            cur_start = i
        elif not m and cur_start is not None:
            if i - cur_start > best_len:
                best, best_len = (cur_start, i), i - cur_start
            cur_start = None
    out = np.zeros(len(mask), bool)
    if best is not None:
        out[best[0]:best[1]] = True
    return out


def fit_noise_params(curve: AllanCurve) -> tuple[float, float, float]:
    """``(white_density, bias_instability, rate_random_walk)`` from one axis.

    The white line (slope -1/2) is read at tau = 1 s and the walk line
    (slope +1/2) at tau = 3 s. The white line uses the longest run of points
    whose local log-log slope is within ``SLOPE_TOL`` of -1/2; the walk line is
    fitted to the curve with the white component removed, over the points past
    the minimum where the walk carries most of the variance.
    """
    if not np.all(curve.adev > 0):
        raise FitError("Allan deviation has non-positive entries (constant signal?)")
    if np.log10(curve.taus[-1] / curve.taus[0]) < 3.0:
        raise FitError("curve spans fewer than 3 decades of tau")
    slopes = curve.log_slopes()
    kmin = int(np.argmin(curve.adev))
    idx = np.arange(len(curve.taus))
    white = _longest_run((np.abs(slopes + 0.5) < SLOPE_TOL) & (idx <= kmin))
    if white.sum() < 3:
        raise FitError(f"no slope -1/2 region; slopes range {slopes.min():.2f}..{slopes.max():.2f}")
    N = _fixed_slope_fit(curve, white, -0.5, 1.0)
    # strip the identified white component, then fit the walk line where it dominates;
    # short clusters get more weight since they average more independent samples
    resid = curve.adev ** 2 - N * N / curve.taus
    walk = (idx >= kmin) & (resid > 0.5 * curve.adev ** 2)
    if walk.sum() >= 3:
        t, r = curve.taus[walk], resid[walk]
        w = 1.0 / t
        K = float(np.exp(np.sum(w * (0.5 * np.log(3.0 * r / t))) / np.sum(w)))
    else:
        # walk not resolved inside the record: bound it by the last point
        K = float(curve.adev[-1] * np.sqrt(3.0 / curve.taus[-1]))
    B = float(curve.adev[kmin] / FLICKER_FACTOR)
    return N, B, K


def calibrate(accel: np.ndarray, gyro: np.ndarray, rate: float, taus=None):
    """Per-axis calibration of a static IMU log; returns ``(ImuCalibration, curves)``."""
    curves, params = {}, {}
    for name, data in (("accel", accel), ("gyro", gyro)):
        fits = []
        for ax in range(3):
            c = allan_deviation(data[:, ax], rate, taus)
            curves[f"{name}_{'xyz'[ax]}"] = c
            fits.append(fit_noise_params(c))
        N, B, K = (np.array(v) for v in zip(*fits))
        params[name] = ImuNoiseParams(N, B, K)
    return ImuCalibration(params["accel"], params["gyro"]), curves


def write_curves_csv(curves: dict[str, AllanCurve], path) -> None:
    names = list(curves)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "tau", "adev"])
        for n in names:
            for t, a in zip(curves[n].taus, curves[n].adev):
                w.writerow([n, repr(float(t)), repr(float(a))])
