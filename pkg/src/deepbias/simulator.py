"""Synthetic world: trajectories, bias truth, IMU and stereo measurements.

Trajectories are analytic (smooth sums of sinusoids composed through
sin/cos), and the ground truth is sampled so that on-manifold Euler
integration of the noiseless IMU stream reproduces it to round-off:

* gyro sample ``k`` is ``Log(R_k^T R_{k+1}) / dt``,
* accelerometer sample ``k`` uses the interval-mean world acceleration
  ``(v_{k+1} - v_k) / dt``,
* positions are propagated with ``p += v dt + a dt^2 / 2``.

Velocities come from complex-step differentiation of the position
functions, which is exact to machine precision.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

from .camera import CameraRig, StereoObservation
from .liealg import Pose3, Rot3, matrix_to_quat

GRAVITY = np.array([0.0, 0.0, -9.80665])
G = 9.80665
PROFILES = ("handheld_walk", "quadruped_trot", "drone", "stationary")
_CSTEP = 1e-30


class ConfigError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


# ----------------------------------------------------------------- config

@dataclass
class NoiseSpec:
    """Continuous-time noise densities.

    White noise in unit/sqrt(Hz); bias random walk in unit*sqrt(Hz)
    (i.e. per-sqrt-second growth of the bias standard deviation).
    """

    accel_white_sigma: float = 2.0e-3
    gyro_white_sigma: float = 2.0e-4
    # walk/white ratios put the Allan minimum near tau = sqrt(3) N / K ~ 100 s
    accel_walk_sigma: float = 3.5e-5
    gyro_walk_sigma: float = 3.5e-6
    pixel_sigma: float = 0.25

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"NoiseSpec.{f.name} must be >= 0")

    def scaled(self, k: float) -> "NoiseSpec":
        return NoiseSpec(*(k * getattr(self, f.name) for f in fields(self)))


@dataclass
class BiasDynamics:
    """Deterministic, device-specific part of the bias process (per axis).

    ``warmup * (1 - exp(-t / warmup_tau)) + sin_amp * sin(2 pi t / sin_period + sin_phase)``
    """

    accel_warmup: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_warmup: np.ndarray = field(default_factory=lambda: np.zeros(3))
    warmup_tau: float = 300.0
    accel_sin_amp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_sin_amp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sin_period: np.ndarray = field(default_factory=lambda: np.full(3, 400.0))
    sin_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "warmup_tau":
                setattr(self, f.name, np.broadcast_to(np.asarray(v, float), (3,)).copy())
        if self.warmup_tau <= 0 or np.any(self.sin_period <= 0):
            raise ConfigError("bias time constants must be positive")

    @classmethod
    def from_identity(cls, identity: int) -> "BiasDynamics":
        """Draw the constants of a simulated IMU unit from its identity number."""
        rng = np.random.default_rng(np.random.SeedSequence([identity, 0xB1A5]))

        def signed(lo, hi):
            return rng.uniform(lo, hi, 3) * rng.choice([-1.0, 1.0], 3)
        return cls(
            accel_warmup=signed(0.02, 0.05),
            gyro_warmup=signed(1.0e-3, 3.0e-3),
            warmup_tau=float(rng.uniform(200.0, 400.0)),
            accel_sin_amp=rng.uniform(0.01, 0.03, 3),
            gyro_sin_amp=rng.uniform(5e-4, 1.5e-3, 3),
            sin_period=rng.uniform(200.0, 600.0, 3),
            sin_phase=rng.uniform(0.0, 2 * np.pi, 3),
        )

    def evaluate(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, float)[:, None]
        warm = 1.0 - np.exp(-t / self.warmup_tau)
        osc = np.sin(2 * np.pi * t / self.sin_period + self.sin_phase)
        return (self.accel_warmup * warm + self.accel_sin_amp * osc,
                self.gyro_warmup * warm + self.gyro_sin_amp * osc)

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


@dataclass
class FaultEvent:
    kind: str              # "blackout" | "distortion"
    start: float
    duration: float
    shift_px: float = 10.0

    def __post_init__(self):
        if self.kind not in ("blackout", "distortion"):
            raise ConfigError(f"unknown fault kind {self.kind!r}")
        if self.duration <= 0:
            raise ConfigError("fault duration must be positive")

    def active(self, t) -> np.ndarray:
        t = np.asarray(t)
        return (t >= self.start) & (t < self.start + self.duration)


@dataclass
class Scenario:
    motion_profile: str = "handheld_walk"
    duration: float = 60.0
    imu_rate: float = 200.0
    keyframe_rate: float = 10.0
    landmark_count: int = 300
    max_range: float = 15.0
    near_clip: float = 0.5
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    imu_identity: int = 0
    bias: BiasDynamics | None = None
    faults: list[FaultEvent] = field(default_factory=list)
    camera: CameraRig = field(default_factory=CameraRig)
    seed: int = 0
    motion_scale: float = 1.0
    power_on_offset: float = 0.0
    landmark_map: np.ndarray | None = None

    def __post_init__(self):
        if self.motion_profile not in PROFILES:
            raise ConfigError(f"unknown motion profile {self.motion_profile!r}; "
                              f"expected one of {PROFILES}")
        if self.duration <= 0 or self.imu_rate <= 0 or self.keyframe_rate <= 0:
            raise ConfigError("duration and rates must be positive")
        ratio = self.imu_rate / self.keyframe_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("imu_rate must be an integer multiple of keyframe_rate")
        if self.motion_profile == "stationary":
            self.motion_scale = 0.0

    @property
    def bias_dynamics(self) -> BiasDynamics:
        return self.bias if self.bias is not None else BiasDynamics.from_identity(self.imu_identity)

    @property
    def imu_per_keyframe(self) -> int:
        return int(round(self.imu_rate / self.keyframe_rate))

    def rng(self, purpose: str) -> np.random.Generator:
        """Independent stream per purpose so adding one consumer never shifts another."""
        key = sum(ord(c) * 131 ** i for i, c in enumerate(purpose)) % (2 ** 32)
        return np.random.default_rng(np.random.SeedSequence([self.seed, key]))

    # ---- (de)serialization
    def to_dict(self) -> dict:
        d = {
            "motion_profile": self.motion_profile, "duration": self.duration,
            "imu_rate": self.imu_rate, "keyframe_rate": self.keyframe_rate,
            "landmark_count": self.landmark_count, "max_range": self.max_range,
            "near_clip": self.near_clip, "noise": asdict(self.noise),
            "imu_identity": self.imu_identity,
            "faults": [asdict(f) for f in self.faults], "camera": self.camera.to_dict(),
            "seed": self.seed, "motion_scale": self.motion_scale,
            "power_on_offset": self.power_on_offset,
        }
        if self.bias is not None:
            d["bias"] = self.bias.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        if "noise" in d:
            d["noise"] = NoiseSpec(**d["noise"])
        if d.get("bias") is not None:
            d["bias"] = BiasDynamics(**d["bias"])
        if "faults" in d:
            d["faults"] = [FaultEvent(**f) for f in d["faults"]]
        if "camera" in d:
            d["camera"] = CameraRig.from_dict(d["camera"])
        if d.get("landmark_map") is not None:
            d["landmark_map"] = np.asarray(d["landmark_map"], float).reshape(-1, 3)
        return cls(**d)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return Scenario.from_dict(d or {})


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(yaml.safe_dump(scenario.to_dict(), sort_keys=False))


# ------------------------------------------------------------ containers

@dataclass(frozen=True)
class TrajectorySample:
    t: float
    pose: Pose3
    velocity: np.ndarray      # base frame
    accel_world: np.ndarray
    angvel_body: np.ndarray


@dataclass(frozen=True)
class BiasTruth:
    t: float
    accel_bias: np.ndarray
    gyro_bias: np.ndarray


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass
class Trajectory:
    t: np.ndarray             # (N,)
    R: np.ndarray             # (N, 3, 3) world <- base
    p: np.ndarray             # (N, 3)
    v_world: np.ndarray       # (N, 3)
    accel_world: np.ndarray   # (N, 3) interval-mean acceleration
    angvel_body: np.ndarray   # (N, 3) interval-mean body rate

    def __len__(self) -> int:
        return len(self.t)

    @property
    def v_body(self) -> np.ndarray:
        return np.einsum("nji,nj->ni", self.R, self.v_world)

    def __getitem__(self, k: int) -> TrajectorySample:
        return TrajectorySample(float(self.t[k]), Pose3(Rot3(self.R[k]), self.p[k]),
                                self.R[k].T @ self.v_world[k], self.accel_world[k].copy(),
                                self.angvel_body[k].copy())

    def __iter__(self) -> Iterator[TrajectorySample]:
        return (self[k] for k in range(len(self)))


@dataclass
class BiasSeries:
    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> BiasTruth:
        return BiasTruth(float(self.t[k]), self.accel[k].copy(), self.gyro[k].copy())


@dataclass
class ImuData:
    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> ImuSample:
        return ImuSample(float(self.t[k]), self.accel[k].copy(), self.gyro[k].copy())

    def segment(self, i0: int, i1: int) -> "ImuData":
        return ImuData(self.t[i0:i1], self.accel[i0:i1], self.gyro[i0:i1])


@dataclass
class VisionData:
    keyframe_times: np.ndarray   # (K,)
    keyframe_imu_index: np.ndarray
    keyframe: np.ndarray         # (M,) keyframe index per observation
    landmark_id: np.ndarray      # (M,)
    uv: np.ndarray               # (M, 3) uL, uR, v

    def __len__(self) -> int:
        return len(self.keyframe)

    def observations(self) -> list[StereoObservation]:
        return [StereoObservation(int(k), int(l), *map(float, u))
                for k, l, u in zip(self.keyframe, self.landmark_id, self.uv)]

    def for_keyframe(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = np.searchsorted(self.keyframe, [k, k + 1])
        return self.landmark_id[lo:hi], self.uv[lo:hi]


@dataclass
class SimData:
    scenario: Scenario
    trajectory: Trajectory
    bias: BiasSeries
    imu: ImuData
    landmarks: np.ndarray
    vision: VisionData


# -------------------------------------------------------- motion profiles

def _profile_phases(scenario: Scenario) -> np.ndarray:
    return scenario.rng("motion").uniform(0.0, 2 * np.pi, 8)


def _profile_functions(name: str, s: float, ph: np.ndarray):
    """Return ``pos(t) -> (x, y, z)`` and ``ypr(t) -> (yaw, pitch, roll)``; complex-safe."""
    tau = 2 * np.pi
    sin = np.sin
    if name in ("handheld_walk", "stationary"):
        fg = 2.0

        def alpha(t):
            return s * (0.15 * t + 0.3 * sin(tau * t / 23 + ph[0]))

        def pos(t):
            rho = 8.0 + s * (1.0 * sin(tau * t / 31 + ph[1]) + 0.03 * sin(np.pi * fg * t + ph[2]))
            a = alpha(t)
            z = 1.4 + s * (0.025 * sin(tau * fg * t) + 0.2 * sin(tau * t / 40 + ph[3]))
            return rho * np.cos(a), rho * sin(a), z

        def ypr(t):
            yaw = alpha(t) + np.pi / 2 + s * 0.15 * sin(tau * 0.25 * t + ph[4])
            pitch = s * (0.05 * sin(tau * fg * t + 0.5) + 0.08 * sin(tau * t / 13 + ph[5]))
            roll = s * (0.04 * sin(np.pi * fg * t + ph[2]) + 0.05 * sin(tau * t / 17 + ph[6]))
            return yaw, pitch, roll
    elif name == "quadruped_trot":
        ft = 3.5

        def alpha(t):
            return s * (0.8 / 6.0 * t + 0.25 * sin(tau * t / 19 + ph[0]))

        def pos(t):
            rho = 6.0 + s * (0.8 * sin(tau * t / 27 + ph[1]) + 0.005 * sin(np.pi * ft * t + ph[2]))
            a = alpha(t)
            z = 0.55 + s * (0.008 * sin(tau * ft * t) + 0.0015 * sin(2 * tau * ft * t + ph[3])
                            + 0.0004 * sin(3 * tau * ft * t + ph[4]))
            return rho * np.cos(a), rho * sin(a), z

        def ypr(t):
            yaw = alpha(t) + np.pi / 2 + s * 0.05 * sin(tau * 0.3 * t + ph[5])
            pitch = s * (0.02 * sin(tau * ft * t + 1.0) + 0.004 * sin(2 * tau * ft * t + ph[6])
                         + 0.03 * sin(tau * t / 11 + ph[7]))
            roll = s * (0.025 * sin(np.pi * ft * t + ph[2]) + 0.004 * sin(3 * np.pi * ft * t))
            return yaw, pitch, roll
    elif name == "drone":
        def pos(t):
            return (s * 7.0 * sin(tau * t / 22 + ph[0]), s * 5.0 * sin(tau * t / 15 + ph[1]),
                    2.0 + s * 0.8 * sin(tau * t / 9 + ph[2]))

        def ypr(t):
            yaw = s * (0.25 * t + 1.0 * sin(tau * t / 7 + ph[3]))
            pitch = s * 0.1 * sin(tau * t / 5 + ph[4])
            roll = s * 0.1 * sin(tau * t / 4 + ph[5])
            return yaw, pitch, roll
    else:
        raise ConfigError(f"unknown motion profile {name!r}")
    return pos, ypr


def _ypr_matrices(yaw, pitch, roll) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty((len(yaw), 3, 3))
    R[:, 0, 0] = cy * cp
    R[:, 0, 1] = cy * sp * sr - sy * cr
    R[:, 0, 2] = cy * sp * cr + sy * sr
    R[:, 1, 0] = sy * cp
    R[:, 1, 1] = sy * sp * sr + cy * cr
    R[:, 1, 2] = sy * sp * cr - cy * sr
    R[:, 2, 0] = -sp
    R[:, 2, 1] = cp * sr
    R[:, 2, 2] = cp * cr
    return R


def _batch_log_small(R: np.ndarray) -> np.ndarray:
    w = 0.5 * np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0],
                        R[:, 1, 0] - R[:, 0, 1]], axis=-1)
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0)
    theta = np.arctan2(s, c)
    k = np.where(s > 1e-12, theta / np.maximum(s, 1e-300), 1.0 + s * s / 6.0)
    return w * k[:, None]


def gen_trajectory(scenario: Scenario) -> Trajectory:
    """Sample the motion profile at the IMU rate (see module docstring)."""
    n = int(round(scenario.duration * scenario.imu_rate)) + 1
    t = np.arange(n) / scenario.imu_rate
    pos, ypr = _profile_functions(scenario.motion_profile, scenario.motion_scale,
                                  _profile_phases(scenario))
    return trajectory_from_functions(t, pos, ypr)


def trajectory_from_functions(t: np.ndarray, pos, ypr) -> Trajectory:
    """Build a consistent :class:`Trajectory` from complex-safe ``pos(t)`` and ``ypr(t)``."""
    t = np.asarray(t, float)
    n = len(t)
    dt = t[1] - t[0] if n > 1 else 1.0
    v_world = np.stack([np.broadcast_to(np.imag(np.asarray(c, complex)) / _CSTEP, (n,))
                        for c in pos(t + 1j * _CSTEP)], axis=-1)
    p0 = np.array([float(np.real(np.ravel(c)[0])) for c in pos(t[:1])])
    yaw, pitch, roll = (np.broadcast_to(np.asarray(a, float), (n,)) for a in ypr(t))
    R = _ypr_matrices(yaw, pitch, roll)

    accel = np.zeros((n, 3))
    omega = np.zeros((n, 3))
    if n > 1:
        accel[:-1] = np.diff(v_world, axis=0) / dt
        accel[-1] = accel[-2]
        omega[:-1] = _batch_log_small(np.einsum("nji,njk->nik", R[:-1], R[1:])) / dt
        omega[-1] = omega[-2]
    p = np.empty((n, 3))
    p[0] = p0
    p[1:] = p0 + np.cumsum(v_world[:-1] * dt + 0.5 * accel[:-1] * dt * dt, axis=0)
    return Trajectory(t, R, p, v_world, accel, omega)


def gen_bias_truth(scenario: Scenario) -> BiasSeries:
    """Random walk plus the unit's deterministic warm-up/oscillation component."""
    n = int(round(scenario.duration * scenario.imu_rate)) + 1
    dt = 1.0 / scenario.imu_rate
    t = np.arange(n) * dt
    rng = scenario.rng("bias_walk")
    nz = scenario.noise
    walk = np.zeros((n, 6))
    steps = rng.normal(size=(n - 1, 6)) * np.sqrt(dt)
    steps[:, :3] *= nz.accel_walk_sigma
    steps[:, 3:] *= nz.gyro_walk_sigma
    walk[1:] = np.cumsum(steps, axis=0)
    ba, bg = scenario.bias_dynamics.evaluate(t + scenario.power_on_offset)
    return BiasSeries(t, ba + walk[:, :3], bg + walk[:, 3:])


def synth_imu(traj: Trajectory, bias: BiasSeries, noise: NoiseSpec, seed: int) -> ImuData:
    """Accelerometer ``R^T (a - g) + b_a + n_a`` and gyro ``w + b_g + n_g``."""
    if len(traj.t) != len(bias.t) or np.max(np.abs(traj.t - bias.t)) > 1e-12:
        raise AlignmentError("trajectory and bias time grids differ")
    n = len(traj.t)
    dt = traj.t[1] - traj.t[0] if n > 1 else 1.0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A0]))
    specific = np.einsum("nji,nj->ni", traj.R, traj.accel_world - GRAVITY)
    white = rng.normal(size=(n, 6)) / np.sqrt(dt)
    accel = specific + bias.accel + noise.accel_white_sigma * white[:, :3]
    gyro = traj.angvel_body + bias.gyro + noise.gyro_white_sigma * white[:, 3:]
    return ImuData(traj.t.copy(), accel, gyro)


def gen_landmarks(traj: Trajectory, scenario: Scenario) -> np.ndarray:
    if scenario.landmark_map is not None:
        return np.asarray(scenario.landmark_map, float)
    lo = traj.p.min(axis=0) - np.array([8.0, 8.0, 1.5])
    hi = traj.p.max(axis=0) + np.array([8.0, 8.0, 2.5])
    return scenario.rng("landmarks").uniform(lo, hi, size=(scenario.landmark_count, 3))


def keyframe_indices(scenario: Scenario, n_imu: int) -> np.ndarray:
    return np.arange(0, n_imu, scenario.imu_per_keyframe)


def synth_vision(traj: Trajectory, scenario: Scenario,
                 landmarks: np.ndarray | None = None) -> VisionData:
    """Project the landmark map at every keyframe, add pixel noise, apply faults."""
    if landmarks is None:
        landmarks = gen_landmarks(traj, scenario)
    rig = scenario.camera
    kf_idx = keyframe_indices(scenario, len(traj.t))
    kf_t = traj.t[kf_idx]
    rng = scenario.rng("pixels")
    ks, ids, uvs = [], [], []
    lm_ids = np.arange(len(landmarks))
    for k, i in enumerate(kf_idx):
        Xc = rig.world_to_camera(traj.R[i], traj.p[i], landmarks)
        ok = (Xc[:, 2] > scenario.near_clip) & (np.linalg.norm(Xc, axis=1) <= scenario.max_range)
        if not np.any(ok):
            continue
        uv = rig.project(Xc[ok])
        uv = uv + scenario.noise.pixel_sigma * rng.normal(size=uv.shape)
        inside = rig.in_image(uv)
        uv, sel = uv[inside], lm_ids[ok][inside]
        drop = False
        for fault in scenario.faults:
            if not fault.active(kf_t[k]):
                continue
            if fault.kind == "blackout":
                drop = True
            elif fault.kind == "distortion":
                uv = uv.copy()
                uv[:, :2] -= fault.shift_px
        if drop or len(sel) == 0:
            continue
        ks.append(np.full(len(sel), k))
        ids.append(sel)
        uvs.append(uv)
    if ks:
        kk, ii, uu = np.concatenate(ks), np.concatenate(ids), np.concatenate(uvs)
    else:
        kk, ii, uu = np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3))
    return VisionData(kf_t, kf_idx, kk, ii, uu)


def simulate(scenario: Scenario) -> SimData:
    traj = gen_trajectory(scenario)
    bias = gen_bias_truth(scenario)
    imu = synth_imu(traj, bias, scenario.noise, scenario.seed)
    landmarks = gen_landmarks(traj, scenario)
    vision = synth_vision(traj, scenario, landmarks)
    return SimData(scenario, traj, bias, imu, landmarks, vision)


# ------------------------------------------------------------------- CSV

def write_csvs(data: SimData, out_dir) -> None:
    """``imu.csv``, ``gt.csv``, ``obs.csv`` plus ``landmarks.csv`` and ``keyframes.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr, b, imu = data.trajectory, data.bias, data.imu
    with open(out / "imu.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "ax", "ay", "az", "gx", "gy", "gz"])
        for k in range(len(imu)):
            w.writerow([repr(float(imu.t[k]))] + [repr(float(x)) for x in (*imu.accel[k], *imu.gyro[k])])
    vb = tr.v_body
    with open(out / "gt.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz",
                    "bax", "bay", "baz", "bgx", "bgy", "bgz"])
        for k in range(len(tr)):
            row = [tr.t[k], *matrix_to_quat(tr.R[k]), *tr.p[k], *vb[k], *b.accel[k], *b.gyro[k]]
            w.writerow([repr(float(x)) for x in row])
    vis = data.vision
    with open(out / "obs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["keyframe", "landmark_id", "uL", "uR", "v"])
        for k, l, u in zip(vis.keyframe, vis.landmark_id, vis.uv):
            w.writerow([int(k), int(l), *(repr(float(x)) for x in u)])
    with open(out / "keyframes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["keyframe", "t", "imu_index"])
        for k, (t, i) in enumerate(zip(vis.keyframe_times, vis.keyframe_imu_index)):
            w.writerow([k, repr(float(t)), int(i)])
    with open(out / "landmarks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["landmark_id", "x", "y", "z"])
        for i, m in enumerate(data.landmarks):
            w.writerow([i, *(repr(float(x)) for x in m)])
    save_scenario(data.scenario, out / "scenario.yaml")


def read_imu_csv(path) -> ImuData:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ImuData(arr[:, 0], arr[:, 1:4], arr[:, 4:7])
