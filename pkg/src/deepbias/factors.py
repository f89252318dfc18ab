"""Prior, stereo-landmark (DCS-robust) and learned-bias unary residuals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraRig, CheiralityError, StereoObservation, project_with_jacobians
from .liealg import Pose3, so3_log, so3_right_jacobian_inv

DEEP_BIAS_ACCEL_VAR = 2.5e-3
DEEP_BIAS_GYRO_VAR = 2.5e-5
DCS_PHI = 1.0
KEYFRAME_MATCH_TOL = 1e-6


class ConfigurationError(ValueError):
    pass


class AssociationError(LookupError):
    pass


@dataclass(frozen=True)
class BiasEstimate:
    t: float
    accel_bias_hat: np.ndarray
    gyro_bias_hat: np.ndarray
    source: str = "network"     # or "ground_truth"

    def __post_init__(self):
        if self.source not in ("network", "ground_truth"):
            raise ValueError(f"unknown bias estimate source {self.source!r}")
        if not (np.all(np.isfinite(self.accel_bias_hat)) and np.all(np.isfinite(self.gyro_bias_hat))):
            raise ValueError("bias estimate must be finite")


# ------------------------------------------------------------------ stereo

def stereo_residual(pose: Pose3, landmark, obs: StereoObservation, rig: CameraRig):
    """``(r, J_pose, J_lm)``; ``J_pose`` is 3x6 over ``[rot, pos]``.

    Raises:
        CheiralityError: if the landmark depth is below ``rig.min_depth``.
    """
    uv, J_rot, J_pos, J_lm, depth = project_with_jacobians(
        rig, pose.R[None], pose.t[None], np.asarray(landmark, float)[None])
    if depth[0] <= rig.min_depth:
        raise CheiralityError(f"landmark {obs.landmark_id} at depth {depth[0]:.3g} m")
    r = uv[0] - obs.as_array()
    return r, np.hstack([J_rot[0], J_pos[0]]), J_lm[0]


def stereo_residuals(rig: CameraRig, R: np.ndarray, p: np.ndarray, m: np.ndarray, uv_obs: np.ndarray):
    """Batched residuals; rows failing the cheirality check are flagged in ``valid``."""
    uv, J_rot, J_pos, J_lm, depth = project_with_jacobians(rig, R, p, m)
    return uv - uv_obs, J_rot, J_pos, J_lm, depth > rig.min_depth


def dcs_scale(residual_sq, phi: float = DCS_PHI):
    """Dynamic covariance scaling factor ``min(1, 2 phi / (phi + r^2))``."""
    return np.minimum(1.0, 2.0 * phi / (phi + np.asarray(residual_sq, float)))


def dcs_cost(residual_sq, phi: float = DCS_PHI):
    """Robust cost whose IRLS weight is ``dcs_scale**2``: quadratic up to ``phi``, then saturating."""
    x = np.asarray(residual_sq, float)
    return np.where(x <= phi, x, 3.0 * phi - 4.0 * phi * phi / (phi + x))


# -------------------------------------------------------------- deep bias

def deep_bias_sqrt_info(accel_var: float = DEEP_BIAS_ACCEL_VAR,
                        gyro_var: float = DEEP_BIAS_GYRO_VAR) -> tuple[float, float]:
    return 1.0 / np.sqrt(accel_var), 1.0 / np.sqrt(gyro_var)


def associate(estimate: BiasEstimate, keyframe_times: np.ndarray, tol: float = KEYFRAME_MATCH_TOL) -> int:
    k = int(np.argmin(np.abs(keyframe_times - estimate.t)))
    if abs(keyframe_times[k] - estimate.t) > tol:
        raise AssociationError(f"bias estimate at t={estimate.t:.6f}s matches no keyframe")
    return k


def deep_bias_residual(bias_a, bias_g, estimate: BiasEstimate,
                       accel_var: float = DEEP_BIAS_ACCEL_VAR, gyro_var: float = DEEP_BIAS_GYRO_VAR):
    """Whitened ``(b^a - b^a_hat, b^g - b^g_hat)``; the Jacobian is the diagonal scale."""
    sa, sg = deep_bias_sqrt_info(accel_var, gyro_var)
    return (sa * (np.asarray(bias_a) - estimate.accel_bias_hat),
            sg * (np.asarray(bias_g) - estimate.gyro_bias_hat))


# ------------------------------------------------------------------ prior

def sqrt_information(cov: np.ndarray) -> np.ndarray:
    """Upper factor ``U`` with ``U^T U = cov^-1``.

    Raises:
        ConfigurationError: for non-symmetric or non-positive-definite input.
    """
    cov = np.asarray(cov, float)
    if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise ConfigurationError("prior covariance is not symmetric")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("prior covariance is not positive definite") from exc
    return np.linalg.inv(L)


def state_difference(R, p, v, ba, bg, R0, p0, v0, ba0, bg0) -> np.ndarray:
    """``x boxminus x0`` in tangent order ``[rot, vel, pos, ba, bg]``."""
    return np.concatenate([so3_log(R0.T @ R), v - v0, p - p0, ba - ba0, bg - bg0])


def prior_residual(state, mean, cov=None, sqrt_info=None):
    """Whitened prior residual and its 15x15 Jacobian.

    ``state`` and ``mean`` are ``(R, p, v, ba, bg)`` tuples.
    """
    if sqrt_info is None:
        sqrt_info = sqrt_information(cov)
    d = state_difference(*state, *mean)
    J = np.eye(15)
    J[0:3, 0:3] = so3_right_jacobian_inv(d[0:3])
    return sqrt_info @ d, sqrt_info @ J
