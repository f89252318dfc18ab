"""Trajectory error metrics: RPE over path-length segments, ATE after rigid alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .liealg import so3_log


class InsufficientLengthError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class Poses:
    t: np.ndarray
    R: np.ndarray     # (n, 3, 3) body-to-world
    p: np.ndarray     # (n, 3)

    @classmethod
    def of(cls, obj) -> "Poses":
        if isinstance(obj, Poses):
            return obj
        if isinstance(obj, tuple):
            return cls(*(np.asarray(x, float) for x in obj))
        return cls(np.asarray(obj.t, float), np.asarray(obj.R, float), np.asarray(obj.p, float))

    def __len__(self) -> int:
        return len(self.t)

    def take(self, idx) -> "Poses":
        return Poses(self.t[idx], self.R[idx], self.p[idx])


def associate(est: Poses, gt: Poses, max_dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour time association; pairs farther apart than ``max_dt`` are dropped."""
    j = np.clip(np.searchsorted(gt.t, est.t), 1, len(gt.t) - 1) if len(gt.t) > 1 else np.zeros(len(est.t), int)
    if len(gt.t) > 1:
        j = np.where(np.abs(gt.t[j - 1] - est.t) <= np.abs(gt.t[j] - est.t), j - 1, j)
    ok = np.abs(gt.t[j] - est.t) <= max_dt
    return np.nonzero(ok)[0], j[ok]


def aligned_pair(est_traj, gt_traj, max_dt: float | None = None) -> tuple[Poses, Poses]:
    est, gt = Poses.of(est_traj), Poses.of(gt_traj)
    if max_dt is None:
        dt = np.diff(est.t)
        max_dt = float(np.median(dt)) if len(dt) else np.inf
    i, j = associate(est, gt, max_dt)
    return est.take(i), gt.take(j)


@dataclass
class RpeReport:
    distance: float
    t_start: np.ndarray
    trans: np.ndarray        # [m]
    rot_deg: np.ndarray      # [deg]

    def __post_init__(self):
        if len(self.trans) == 0:
            raise InsufficientLengthError(f"no {self.distance} m segment in the trajectory")

    @property
    def count(self) -> int:
        return len(self.trans)

    @property
    def mean(self) -> float:
        return float(np.mean(self.trans))

    @property
    def median(self) -> float:
        return float(np.median(self.trans))

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.trans ** 2)))

    @property
    def rot_mean(self) -> float:
        return float(np.mean(self.rot_deg))


def path_length(p: np.ndarray) -> np.ndarray:
    """Cumulative distance along a polyline, starting at 0."""
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])


def rpe(est_traj, gt_traj, distance: float = 5.0, max_dt: float | None = None) -> RpeReport:
    """Relative pose error over ``distance``-metre segments, one segment per start pose.

    The segment end is the first pose at least ``distance`` metres further
    along the ground-truth path. Errors are the translation and rotation of
    ``(G_i^-1 G_j)^-1 (E_i^-1 E_j)``.

    Raises:
        InsufficientLengthError: if the path is shorter than ``distance``.
    """
    est, gt = aligned_pair(est_traj, gt_traj, max_dt)
    s = path_length(gt.p)
    ends = np.searchsorted(s, s + distance - 1e-12)
    starts = np.nonzero(ends < len(s))[0]
    if len(starts) == 0:
        raise InsufficientLengthError(f"path of {s[-1] if len(s) else 0.0:.2f} m is shorter than {distance} m")
    ends = ends[starts]
    trans, rot = np.zeros(len(starts)), np.zeros(len(starts))
    for n, (i, j) in enumerate(zip(starts, ends)):
        Rg = gt.R[i].T @ gt.R[j]
        tg = gt.R[i].T @ (gt.p[j] - gt.p[i])
        Re = est.R[i].T @ est.R[j]
        te = est.R[i].T @ (est.p[j] - est.p[i])
        trans[n] = np.linalg.norm(Rg.T @ (te - tg))
        rot[n] = np.degrees(np.linalg.norm(so3_log(Rg.T @ Re)))
    return RpeReport(distance, est.t[starts], trans, rot)


def umeyama(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid ``(R, t)`` minimizing ``sum |dst - (R src + t)|^2`` (no scale).

    Raises:
        AlignmentError: for fewer than 3 points or a collinear configuration.
    """
    if len(src) < 3:
        raise AlignmentError(f"need at least 3 poses for alignment, got {len(src)}")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    A, B = src - mu_s, dst - mu_d
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise AlignmentError("degenerate (collinear) trajectory, rotation is not determined")
    U, _, Vt = np.linalg.svd(B.T @ A)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def ate(est_traj, gt_traj, max_dt: float | None = None) -> float:
    """Position RMSE after rigid alignment of the estimate onto ground truth."""
    return _ate(*aligned_pair(est_traj, gt_traj, max_dt))


def _ate(est: Poses, gt: Poses) -> float:
    R, t = umeyama(est.p, gt.p)
    e = gt.p - (est.p @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))


def drift_rate(est_traj, gt_traj, max_dt: float | None = None) -> float:
    """ATE per metre travelled along the ground-truth path."""
    est, gt = aligned_pair(est_traj, gt_traj, max_dt)
    length = path_length(gt.p)[-1]
    if length <= 0:
        raise InsufficientLengthError("ground truth does not move")
    return _ate(est, gt) / length
