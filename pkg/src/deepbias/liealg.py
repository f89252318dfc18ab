"""SO(3) / SE(3) helpers.

Rotations are plain 3x3 float64 arrays in the hot paths (preintegration,
factor linearization); :class:`Rot3` and :class:`Pose3` wrap them for the
public API and keep the invariants checkable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
ORTHO_TOL = 1e-9


def _as_vec3(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {v.shape}")
    return v


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(phi) -> np.ndarray:
    """Rodrigues formula.

    Raises:
        ValueError: if ``phi`` has non-finite entries.
    """
    phi = _as_vec3(phi)
    if not np.all(np.isfinite(phi)):
        raise ValueError(f"so3_exp: non-finite rotation vector {phi}")
    theta2 = phi @ phi
    K = skew(phi)
    if theta2 < SMALL_ANGLE * SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    theta = np.sqrt(theta2)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal logarithm, ``|result| <= pi``."""
    R = np.asarray(R, dtype=np.float64)
    w = 0.5 * vee(R - R.T)
    s = np.linalg.norm(w)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta < 1e-6:
        # theta/sin(theta) ~ 1 + theta^2/6
        return (1.0 + s * s / 6.0) * w
    if np.pi - theta > 1e-6:
        return (theta / s) * w
    # Near pi: axis from the symmetric part, sign from the antisymmetric part.
    B = (0.5 * (R + R.T) - c * np.eye(3)) / (1.0 - c)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0.0:
        axis = -axis
    return theta * axis


def so3_right_jacobian(phi) -> np.ndarray:
    """``exp(phi + d) ~= exp(phi) @ exp(Jr(phi) @ d)`` for small ``d``."""
    phi = _as_vec3(phi)
    theta2 = phi @ phi
    K = skew(phi)
    if theta2 < 1e-10:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    theta = np.sqrt(theta2)
    return (np.eye(3)
            - (1.0 - np.cos(theta)) / theta2 * K
            + (theta - np.sin(theta)) / (theta2 * theta) * (K @ K))


def so3_right_jacobian_inv(phi) -> np.ndarray:
    phi = _as_vec3(phi)
    theta2 = phi @ phi
    K = skew(phi)
    if theta2 < 1e-10:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    theta = np.sqrt(theta2)
    coef = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


# ---------------------------------------------------------------- batched
# Leading axis indexes independent rotations; same conventions as above.

def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -v[..., 2], v[..., 1]
    K[..., 1, 0], K[..., 1, 2] = v[..., 2], -v[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -v[..., 1], v[..., 0]
    return K


def _series(phi: np.ndarray):
    theta2 = np.einsum("...i,...i->...", phi, phi)
    small = theta2 < 1e-10
    t2 = np.where(small, 1.0, theta2)
    t = np.sqrt(t2)
    return theta2, small, t2, t


def so3_exp_batch(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta2, small, t2, t = _series(phi)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(t)) / t2)
    K = skew_batch(phi)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_right_jacobian_batch(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta2, small, t2, t = _series(phi)
    c = np.where(small, 0.5, (1.0 - np.cos(t)) / t2)
    d = np.where(small, 1.0 / 6.0, (t - np.sin(t)) / (t2 * t))
    K = skew_batch(phi)
    return np.eye(3) - c[..., None, None] * K + d[..., None, None] * (K @ K)


def so3_right_jacobian_inv_batch(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta2, small, t2, t = _series(phi)
    coef = np.where(small, 1.0 / 12.0, 1.0 / t2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)))
    K = skew_batch(phi)
    return np.eye(3) + 0.5 * K + coef[..., None, None] * (K @ K)


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    w = 0.5 * np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                        R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    scale = np.where(theta < 1e-6, 1.0 + s * s / 6.0, theta / np.where(s > 0.0, s, 1.0))
    out = scale[..., None] * w
    near_pi = np.pi - theta <= 1e-6
    if np.any(near_pi):
        flat_R = R.reshape(-1, 3, 3)
        flat = out.reshape(-1, 3)
        for i in np.flatnonzero(near_pi.ravel()):
            flat[i] = so3_log(flat_R[i])
    return out


def orthonormality_defect(R: np.ndarray) -> float:
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


def normalize_rotation(R: np.ndarray) -> np.ndarray:
    """Nearest rotation in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def maybe_normalize(R: np.ndarray) -> np.ndarray:
    if orthonormality_defect(R) > ORTHO_TOL:
        return normalize_rotation(R)
    return R


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def ypr_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Z-Y-X intrinsic Euler angles: ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def matrix_to_ypr(R: np.ndarray) -> tuple[float, float, float]:
    yaw = np.arctan2(R[1, 0], R[0, 0])
    pitch = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    return float(yaw), float(pitch), float(roll)


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Hamilton quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class Rot3:
    """Element of SO(3). Immutable; ``m`` is never mutated after creation."""

    m: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"Rot3 needs a 3x3 matrix, got {m.shape}")
        m = maybe_normalize(m)
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Rot3":
        return cls(np.eye(3))

    @classmethod
    def exp(cls, phi) -> "Rot3":
        return cls(so3_exp(phi))

    def log(self) -> np.ndarray:
        return so3_log(self.m)

    def inverse(self) -> "Rot3":
        return Rot3(self.m.T)

    def compose(self, other: "Rot3") -> "Rot3":
        return Rot3(self.m @ other.m)

    def __matmul__(self, other):
        if isinstance(other, Rot3):
            return self.compose(other)
        return self.m @ np.asarray(other, dtype=np.float64)

    def rotate(self, v) -> np.ndarray:
        return self.m @ _as_vec3(v)


@dataclass(frozen=True)
class Pose3:
    """Rigid transform ``x_parent = R @ x_child + t``."""

    rotation: Rot3 = field(default_factory=Rot3.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not isinstance(self.rotation, Rot3):
            object.__setattr__(self, "rotation", Rot3(self.rotation))
        t = _as_vec3(self.translation).copy()
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose3":
        return cls()

    @property
    def R(self) -> np.ndarray:
        return self.rotation.m

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(self.rotation.compose(other.rotation),
                     self.R @ other.t + self.t)

    def __matmul__(self, other: "Pose3") -> "Pose3":
        return self.compose(other)

    def inverse(self) -> "Pose3":
        Rt = self.R.T
        return Pose3(Rot3(Rt), -Rt @ self.t)

    def transform_from(self, point) -> np.ndarray:
        """Map a point expressed in the child frame into the parent frame."""
        return self.R @ _as_vec3(point) + self.t

    def transform_to(self, point) -> np.ndarray:
        return self.R.T @ (_as_vec3(point) - self.t)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T
