"""IMU preintegration between keyframes and the 15-dim inertial residual.

Error-state and residual ordering throughout: ``[rot, vel, pos, ba, bg]``.
Velocities are expressed in the base frame, so the world velocity of a
state is ``R @ v``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .liealg import (
    Rot3, skew, skew_batch, so3_exp, so3_exp_batch, so3_log, so3_log_batch, so3_right_jacobian,
    so3_right_jacobian_batch, so3_right_jacobian_inv, so3_right_jacobian_inv_batch,
)
from .simulator import GRAVITY, NoiseSpec

ROT, VEL, POS, BA, BG = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))
LARGE_BIAS_STEP = 0.1


class IntegrationError(ValueError):
    pass


@dataclass
class PreintegratedDelta:
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    dt_total: float
    cov: np.ndarray                  # 15x15
    J_Rg: np.ndarray
    J_va: np.ndarray
    J_vg: np.ndarray
    J_pa: np.ndarray
    J_pg: np.ndarray
    bias_a_lin: np.ndarray
    bias_g_lin: np.ndarray

    @property
    def rotation(self) -> Rot3:
        return Rot3(self.dR)

    @property
    def bias_jacobians(self) -> dict[str, np.ndarray]:
        return {"R_g": self.J_Rg, "v_a": self.J_va, "v_g": self.J_vg,
                "p_a": self.J_pa, "p_g": self.J_pg}

    def information(self) -> np.ndarray:
        return np.linalg.inv(self.cov)


def integrate(t: np.ndarray, accel: np.ndarray, gyro: np.ndarray, bias_a, bias_g,
              noise: NoiseSpec | None = None, t_end: float | None = None) -> PreintegratedDelta:
    """Preintegrate samples ``k`` over ``[t_k, t_{k+1})``; the last one runs to ``t_end``.

    Raises:
        IntegrationError: on empty input, non-increasing timestamps, or a
            single sample without ``t_end``.
    """
    t = np.asarray(t, float)
    n = len(t)
    if n == 0:
        raise IntegrationError("no IMU samples to integrate")
    if t_end is None:
        if n < 2:
            raise IntegrationError("a single sample needs t_end")
        t_end = t[-1] + (t[-1] - t[-2])
    dts = np.diff(np.append(t, t_end))
    if np.any(dts <= 0):
        raise IntegrationError("IMU timestamps must be strictly increasing")
    noise = noise or NoiseSpec()
    ba = np.asarray(bias_a, float)
    bg = np.asarray(bias_g, float)
    a = np.asarray(accel, float) - ba
    w = np.asarray(gyro, float) - bg
    phis = w * dts[:, None]
    steps, Jrs = so3_exp_batch(phis), so3_right_jacobian_batch(phis)

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    J_Rg = np.zeros((3, 3))
    J_va = np.zeros((3, 3))
    J_vg = np.zeros((3, 3))
    J_pa = np.zeros((3, 3))
    J_pg = np.zeros((3, 3))
    cov = np.zeros((15, 15))
    F = np.eye(15)
    I3 = np.eye(3)
    qa, qg = noise.accel_white_sigma ** 2, noise.gyro_white_sigma ** 2
    qwa, qwg = noise.accel_walk_sigma ** 2, noise.gyro_walk_sigma ** 2
    for k in range(n):
        dt = dts[k]
        ak = a[k]
        dRa = dR @ skew(ak)
        # error-state transition; biases enter with a negative sign
        F[ROT, ROT] = steps[k].T
        F[ROT, BG] = -Jrs[k] * dt
        F[VEL, ROT] = -dRa * dt
        F[VEL, BA] = -dR * dt
        F[POS, ROT] = -0.5 * dRa * dt * dt
        F[POS, VEL] = I3 * dt
        F[POS, BA] = -0.5 * dR * dt * dt
        Gw = np.zeros((15, 15))
        Gw[ROT, ROT] = Jrs[k] @ Jrs[k].T * (qg * dt)
        Ra = dR * dt
        Qv = Ra @ Ra.T * (qa / dt)
        Gw[VEL, VEL] = Qv
        Gw[VEL, POS] = Qv * (0.5 * dt)
        Gw[POS, VEL] = Qv * (0.5 * dt)
        Gw[POS, POS] = Qv * (0.25 * dt * dt)
        Gw[BA, BA] = I3 * (qwa * dt)
        Gw[BG, BG] = I3 * (qwg * dt)
        cov = F @ cov @ F.T + Gw

        J_pa = J_pa + J_va * dt - 0.5 * dR * dt * dt
        J_pg = J_pg + J_vg * dt - 0.5 * dRa @ J_Rg * dt * dt
        J_va = J_va - dR * dt
        J_vg = J_vg - dRa @ J_Rg * dt
        J_Rg = steps[k].T @ J_Rg - Jrs[k] * dt

        dp = dp + dv * dt + 0.5 * (dR @ ak) * dt * dt
        dv = dv + (dR @ ak) * dt
        dR = dR @ steps[k]
    cov = 0.5 * (cov + cov.T)
    return PreintegratedDelta(dR, dv, dp, float(t_end - t[0]), cov, J_Rg, J_va, J_vg, J_pa, J_pg,
                              ba.copy(), bg.copy())


def bias_correct(delta: PreintegratedDelta, bias_a, bias_g):
    """First-order update of ``(dR, dv, dp)`` to new biases."""
    dba = np.asarray(bias_a, float) - delta.bias_a_lin
    dbg = np.asarray(bias_g, float) - delta.bias_g_lin
    if max(np.abs(dba).max(), np.abs(dbg).max()) > LARGE_BIAS_STEP:
        warnings.warn("bias moved far from the preintegration linearization point; "
                      "re-integrate for accuracy", RuntimeWarning, stacklevel=2)
    dR = delta.dR @ so3_exp(delta.J_Rg @ dbg)
    dv = delta.dv + delta.J_va @ dba + delta.J_vg @ dbg
    dp = delta.dp + delta.J_pa @ dba + delta.J_pg @ dbg
    return dR, dv, dp


def compose(d1: PreintegratedDelta, d2: PreintegratedDelta) -> PreintegratedDelta:
    """Concatenate consecutive deltas that share a linearization bias.

    Means and bias Jacobians compose exactly. Covariance composes through
    the same linear maps; cross-terms between the first segment's bias walk
    and the second segment's delta are carried by the transition.
    """
    if not (np.allclose(d1.bias_a_lin, d2.bias_a_lin) and np.allclose(d1.bias_g_lin, d2.bias_g_lin)):
        raise IntegrationError("deltas were integrated at different biases")
    R1, t2 = d1.dR, d2.dt_total
    dR = R1 @ d2.dR
    dv = d1.dv + R1 @ d2.dv
    dp = d1.dp + d1.dv * t2 + R1 @ d2.dp
    J_Rg = d2.dR.T @ d1.J_Rg + d2.J_Rg
    J_va = d1.J_va + R1 @ d2.J_va
    J_vg = d1.J_vg - R1 @ skew(d2.dv) @ d1.J_Rg + R1 @ d2.J_vg
    J_pa = d1.J_pa + d1.J_va * t2 + R1 @ d2.J_pa
    J_pg = d1.J_pg + d1.J_vg * t2 - R1 @ skew(d2.dp) @ d1.J_Rg + R1 @ d2.J_pg

    # first-segment errors (incl. its bias error) mapped through the second segment
    A = np.eye(15)
    A[ROT, ROT] = d2.dR.T
    A[VEL, ROT] = -R1 @ skew(d2.dv)
    A[POS, ROT] = -R1 @ skew(d2.dp)
    A[POS, VEL] = np.eye(3) * t2
    A[ROT, BG] = d2.J_Rg
    A[VEL, BA], A[VEL, BG] = R1 @ d2.J_va, R1 @ d2.J_vg
    A[POS, BA], A[POS, BG] = R1 @ d2.J_pa, R1 @ d2.J_pg
    B = np.eye(15)
    B[VEL, VEL] = R1
    B[POS, POS] = R1
    B[VEL, ROT] = np.zeros((3, 3))
    cov = A @ d1.cov @ A.T + B @ d2.cov @ B.T
    return PreintegratedDelta(dR, dv, dp, d1.dt_total + t2, 0.5 * (cov + cov.T),
                              J_Rg, J_va, J_vg, J_pa, J_pg, d1.bias_a_lin, d1.bias_g_lin)


def imu_residual(delta: PreintegratedDelta, Ri, pi, vi, bai, bgi, Rj, pj, vj, baj, bgj,
                 gravity: np.ndarray = GRAVITY, jacobians: bool = True):
    """15-dim residual and its Jacobians w.r.t. the 15-dim tangents of both states.

    Returns ``(r, Ji, Jj)`` (``Ji``/``Jj`` are ``None`` when ``jacobians`` is False).
    """
    dt = delta.dt_total
    dba = bai - delta.bias_a_lin
    dbg = bgi - delta.bias_g_lin
    corr_phi = delta.J_Rg @ dbg
    dRc = delta.dR @ so3_exp(corr_phi)
    dvc = delta.dv + delta.J_va @ dba + delta.J_vg @ dbg
    dpc = delta.dp + delta.J_pa @ dba + delta.J_pg @ dbg
    RiT = Ri.T
    RiTRj = RiT @ Rj
    u_v = Rj @ vj - gravity * dt
    u_p = pj - pi - 0.5 * gravity * dt * dt
    r = np.empty(15)
    r_R = so3_log(dRc.T @ RiTRj)
    r[ROT] = r_R
    r[VEL] = RiT @ u_v - vi - dvc
    r[POS] = RiT @ u_p - vi * dt - dpc
    r[BA] = baj - bai
    r[BG] = bgj - bgi
    if not jacobians:
        return r, None, None

    Jinv = so3_right_jacobian_inv(r_R)
    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    Ji[ROT, ROT] = -Jinv @ RiTRj.T
    Ji[ROT, BG] = -Jinv @ so3_exp(r_R).T @ so3_right_jacobian(corr_phi) @ delta.J_Rg
    Ji[VEL, ROT] = skew(RiT @ u_v)
    Ji[VEL, VEL] = -np.eye(3)
    Ji[VEL, BA] = -delta.J_va
    Ji[VEL, BG] = -delta.J_vg
    Ji[POS, ROT] = skew(RiT @ u_p)
    Ji[POS, VEL] = -np.eye(3) * dt
    Ji[POS, POS] = -RiT
    Ji[POS, BA] = -delta.J_pa
    Ji[POS, BG] = -delta.J_pg
    Ji[BA, BA] = -np.eye(3)
    Ji[BG, BG] = -np.eye(3)

    Jj[ROT, ROT] = Jinv
    Jj[VEL, ROT] = -RiTRj @ skew(vj)
    Jj[VEL, VEL] = RiTRj
    Jj[POS, POS] = RiT
    Jj[BA, BA] = np.eye(3)
    Jj[BG, BG] = np.eye(3)
    return r, Ji, Jj


@dataclass
class DeltaStack:
    """Several deltas stacked along a leading axis for batched residuals."""

    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    dt: np.ndarray
    J_Rg: np.ndarray
    J_va: np.ndarray
    J_vg: np.ndarray
    J_pa: np.ndarray
    J_pg: np.ndarray
    bias_a_lin: np.ndarray
    bias_g_lin: np.ndarray

    @classmethod
    def of(cls, deltas) -> "DeltaStack":
        def st(name):
            return np.stack([getattr(d, name) for d in deltas])
        return cls(st("dR"), st("dv"), st("dp"), np.array([d.dt_total for d in deltas]),
                   st("J_Rg"), st("J_va"), st("J_vg"), st("J_pa"), st("J_pg"),
                   st("bias_a_lin"), st("bias_g_lin"))


def _mv(A, x):
    return np.einsum("nij,nj->ni", A, x)


def imu_residuals(ds: DeltaStack, Ri, pi, vi, bai, bgi, Rj, pj, vj, baj, bgj,
                  gravity: np.ndarray = GRAVITY, jacobians: bool = True):
    """Batched :func:`imu_residual`; every argument carries a leading factor axis."""
    dt = ds.dt[:, None]
    dba = bai - ds.bias_a_lin
    dbg = bgi - ds.bias_g_lin
    corr_phi = _mv(ds.J_Rg, dbg)
    dRc = ds.dR @ so3_exp_batch(corr_phi)
    dvc = ds.dv + _mv(ds.J_va, dba) + _mv(ds.J_vg, dbg)
    dpc = ds.dp + _mv(ds.J_pa, dba) + _mv(ds.J_pg, dbg)
    RiT = np.swapaxes(Ri, 1, 2)
    RiTRj = RiT @ Rj
    u_v = _mv(Rj, vj) - gravity * dt
    u_p = pj - pi - 0.5 * gravity * dt * dt
    n = len(dt)
    r = np.empty((n, 15))
    r_R = so3_log_batch(np.swapaxes(dRc, 1, 2) @ RiTRj)
    RiTu_v = _mv(RiT, u_v)
    RiTu_p = _mv(RiT, u_p)
    r[:, ROT] = r_R
    r[:, VEL] = RiTu_v - vi - dvc
    r[:, POS] = RiTu_p - vi * dt - dpc
    r[:, BA] = baj - bai
    r[:, BG] = bgj - bgi
    if not jacobians:
        return r, None, None

    I3 = np.eye(3)
    Jinv = so3_right_jacobian_inv_batch(r_R)
    Ji = np.zeros((n, 15, 15))
    Jj = np.zeros((n, 15, 15))
    Ji[:, ROT, ROT] = -Jinv @ np.swapaxes(RiTRj, 1, 2)
    Ji[:, ROT, BG] = -Jinv @ np.swapaxes(so3_exp_batch(r_R), 1, 2) @ so3_right_jacobian_batch(corr_phi) @ ds.J_Rg
    Ji[:, VEL, ROT] = skew_batch(RiTu_v)
    Ji[:, VEL, VEL] = -I3
    Ji[:, VEL, BA] = -ds.J_va
    Ji[:, VEL, BG] = -ds.J_vg
    Ji[:, POS, ROT] = skew_batch(RiTu_p)
    Ji[:, POS, VEL] = -I3 * dt[:, :, None]
    Ji[:, POS, POS] = -RiT
    Ji[:, POS, BA] = -ds.J_pa
    Ji[:, POS, BG] = -ds.J_pg
    Ji[:, BA, BA] = -I3
    Ji[:, BG, BG] = -I3

    Jj[:, ROT, ROT] = Jinv
    Jj[:, VEL, ROT] = -RiTRj @ skew_batch(vj)
    Jj[:, VEL, VEL] = RiTRj
    Jj[:, POS, POS] = RiT
    Jj[:, BA, BA] = I3
    Jj[:, BG, BG] = I3
    return r, Ji, Jj
