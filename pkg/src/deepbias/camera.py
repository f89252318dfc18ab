"""Rectified pinhole stereo rig and its projection with Jacobians."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .liealg import Pose3, Rot3

# optical frame (z forward, x right, y down) expressed in a base frame
# with x forward, y left, z up
_R_BASE_OPTICAL = np.array([[0.0, 0.0, 1.0],
                            [-1.0, 0.0, 0.0],
                            [0.0, -1.0, 0.0]])


class CheiralityError(ValueError):
    """Landmark is (nearly) behind the camera."""


@dataclass(frozen=True)
class StereoObservation:
    keyframe: int
    landmark_id: int
    uL: float
    uR: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.uL, self.uR, self.v])


@dataclass(frozen=True)
class CameraRig:
    """Left camera intrinsics plus baseline; the right camera sits at +baseline along optical x."""

    f: float = 380.0
    cx: float = 376.0
    cy: float = 240.0
    baseline: float = 0.11
    width: int = 752
    height: int = 480
    extrinsic: Pose3 = field(default_factory=lambda: Pose3(Rot3(_R_BASE_OPTICAL),
                                                            np.array([0.05, 0.0, 0.0])))
    min_depth: float = 0.01

    def __post_init__(self):
        if self.f <= 0 or self.baseline <= 0:
            raise ValueError("camera focal length and baseline must be positive")

    @property
    def R_bc(self) -> np.ndarray:
        return self.extrinsic.R

    @property
    def t_bc(self) -> np.ndarray:
        return self.extrinsic.t

    def to_dict(self) -> dict:
        return {"f": self.f, "cx": self.cx, "cy": self.cy, "baseline": self.baseline,
                "width": self.width, "height": self.height,
                "extrinsic_translation": self.t_bc.tolist(), "min_depth": self.min_depth}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        d = dict(d)
        t = d.pop("extrinsic_translation", None)
        if t is not None:
            d["extrinsic"] = Pose3(Rot3(_R_BASE_OPTICAL), np.asarray(t, float))
        return cls(**d)

    def world_to_camera(self, R_wb: np.ndarray, p_wb: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Points (N, 3) in the world frame to the left optical frame."""
        Xb = (points - p_wb) @ R_wb
        return (Xb - self.t_bc) @ self.R_bc

    def project(self, Xc: np.ndarray) -> np.ndarray:
        """(N, 3) optical-frame points to (N, 3) ``[uL, uR, v]`` pixels."""
        X, Y, Z = Xc[..., 0], Xc[..., 1], Xc[..., 2]
        uL = self.f * X / Z + self.cx
        uR = self.f * (X - self.baseline) / Z + self.cx
        v = self.f * Y / Z + self.cy
        return np.stack([uL, uR, v], axis=-1)

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        return ((uv[..., 0] >= 0) & (uv[..., 0] < self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] < self.width)
                & (uv[..., 2] >= 0) & (uv[..., 2] < self.height))

    def triangulate(self, R_wb: np.ndarray, p_wb: np.ndarray, uv: np.ndarray) -> np.ndarray:
        """Back-project ``[uL, uR, v]`` rows to world points using the stereo disparity."""
        uv = np.atleast_2d(uv)
        disp = np.maximum(uv[:, 0] - uv[:, 1], 1e-3)
        Z = self.f * self.baseline / disp
        X = (uv[:, 0] - self.cx) * Z / self.f
        Y = (uv[:, 2] - self.cy) * Z / self.f
        Xc = np.stack([X, Y, Z], axis=-1)
        Xb = Xc @ self.R_bc.T + self.t_bc
        return Xb @ R_wb.T + p_wb


def project_with_jacobians(rig: CameraRig, R_wb: np.ndarray, p_wb: np.ndarray,
                           points: np.ndarray):
    """Batched stereo projection.

    Args:
        R_wb: (N, 3, 3) body orientations.
        p_wb: (N, 3) body positions.
        points: (N, 3) world landmarks.

    Returns:
        ``(uv, J_rot, J_pos, J_lm, depth)`` with ``uv`` (N, 3) and Jacobians
        (N, 3, 3) w.r.t. the right-perturbed rotation, the world position and
        the landmark.
    """
    d = points - p_wb
    Xb = np.einsum("nji,nj->ni", R_wb, d)             # R^T (m - p)
    Xc = (Xb - rig.t_bc) @ rig.R_bc
    X, Y, Z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / Z
    f, b = rig.f, rig.baseline
    uv = np.stack([f * X * iz + rig.cx, f * (X - b) * iz + rig.cx, f * Y * iz + rig.cy], axis=-1)

    P = np.zeros((len(Z), 3, 3))
    P[:, 0, 0] = f * iz
    P[:, 0, 2] = -f * X * iz * iz
    P[:, 1, 0] = f * iz
    P[:, 1, 2] = -f * (X - b) * iz * iz
    P[:, 2, 1] = f * iz
    P[:, 2, 2] = -f * Y * iz * iz
    PR = P @ rig.R_bc.T                               # d uv / d Xb
    # Xb(dphi) = Exp(-dphi) R^T (m - p) ~ Xb + [Xb]x dphi
    S = np.zeros((len(Z), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -Xb[:, 2], Xb[:, 1]
    S[:, 1, 0], S[:, 1, 2] = Xb[:, 2], -Xb[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -Xb[:, 1], Xb[:, 0]
    J_rot = PR @ S
    RT = np.transpose(R_wb, (0, 2, 1))
    J_lm = PR @ RT
    J_pos = -J_lm
    return uv, J_rot, J_pos, J_lm, Z
