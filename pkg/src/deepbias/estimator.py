"""Fixed-lag sliding-window smoother over keyframe states and landmarks.

The window holds the newest ``window_size`` keyframes. Landmarks are
estimated jointly and eliminated by a block Schur complement in every
Levenberg-Marquardt step. When the window is full the oldest keyframe is
marginalized together with the landmarks nobody else observes. The result
is a dense Gaussian prior on the oldest surviving state and on the
landmarks that state still shares with the window; those landmarks are
kept in the reduced (dense) system during later solves.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse import csr_matrix

from .camera import CameraRig
from .factors import (
    DEEP_BIAS_ACCEL_VAR, DEEP_BIAS_GYRO_VAR, BiasEstimate, dcs_cost, dcs_scale,
    deep_bias_sqrt_info, state_difference, stereo_residuals,
)
from .liealg import Rot3, matrix_to_quat, so3_exp, so3_right_jacobian_inv
from .preintegration import (
    BA, BG, POS, ROT, VEL, DeltaStack, PreintegratedDelta, bias_correct, imu_residual, imu_residuals,
    integrate,
)
from .simulator import GRAVITY, NoiseSpec

log = logging.getLogger(__name__)

# tangent columns touched by a stereo observation: rotation then position
_POSE_COLS = np.array([0, 1, 2, 6, 7, 8])


class OrderingError(RuntimeError):
    pass


class StateError(RuntimeError):
    pass


class NonFiniteCostError(FloatingPointError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class NavState:
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray           # base frame
    ba: np.ndarray
    bg: np.ndarray

    def __post_init__(self):
        for k in ("R", "p", "v", "ba", "bg"):
            setattr(self, k, np.array(getattr(self, k), dtype=np.float64))

    @property
    def rotation(self) -> Rot3:
        return Rot3(self.R)

    def as_tuple(self):
        return self.R, self.p, self.v, self.ba, self.bg

    def retract(self, d: np.ndarray) -> "NavState":
        return NavState(self.R @ so3_exp(d[ROT]), self.p + d[POS], self.v + d[VEL],
                        self.ba + d[BA], self.bg + d[BG])

    def copy(self) -> "NavState":
        return NavState(*(a.copy() for a in self.as_tuple()))


@dataclass
class EstimatorSettings:
    window_size: int = 10
    max_iterations: int = 50
    step_tol: float = 1e-8
    cost_tol: float = 1e-9
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_max: float = 1e8
    pixel_sigma: float = 0.25
    # chi-square 95% quantile for a 3-dof pixel residual; leaves inliers unweighted
    dcs_phi: float = 7.815
    imu_noise: NoiseSpec = field(default_factory=NoiseSpec)
    deep_bias_accel_var: float = DEEP_BIAS_ACCEL_VAR
    deep_bias_gyro_var: float = DEEP_BIAS_GYRO_VAR
    bias_lock_info: float = 1e12
    # initial-state prior standard deviations: rot, vel, pos, ba, bg
    prior_sigmas: tuple = (1e-3, 1e-2, 1e-3, 5e-2, 5e-3)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorSettings":
        d = dict(d)
        if "imu_noise" in d:
            d["imu_noise"] = NoiseSpec(**d["imu_noise"])
        if "prior_sigmas" in d:
            d["prior_sigmas"] = tuple(d["prior_sigmas"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior_sigmas"] = list(self.prior_sigmas)
        return d


@dataclass
class LinearPrior:
    """``|| U [x boxminus mean; m - m_mean] + r0 ||^2`` on one state and some landmarks."""

    mean: NavState
    U: np.ndarray
    r0: np.ndarray
    lm_ids: list = field(default_factory=list)
    lm_mean: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        # normal-equation form, reused every iteration
        self._info = self.U.T @ self.U
        self._b = self.U.T @ self.r0
        self._c = float(self.r0 @ self.r0)

    def _delta(self, x: NavState, lm):
        d = state_difference(*x.as_tuple(), *self.mean.as_tuple())
        if len(self.lm_ids):
            d = np.concatenate([d, (np.asarray(lm) - self.lm_mean).ravel()])
        return d

    def linearize(self, x: NavState, lm=None):
        """Whitened ``(r, J)``."""
        d = self._delta(x, lm)
        J = np.eye(len(d))
        J[ROT, ROT] = so3_right_jacobian_inv(d[ROT])
        return self.U @ d + self.r0, self.U @ J

    def normal_equations(self, x: NavState, lm=None):
        """``(J^T J, J^T r)`` without forming ``J``."""
        d = self._delta(x, lm)
        Jr = so3_right_jacobian_inv(d[ROT])
        H = self._info.copy()
        g = self._info @ d + self._b
        H[:3, :] = Jr.T @ H[:3, :]
        H[:, :3] = H[:, :3] @ Jr
        g[:3] = Jr.T @ g[:3]
        return H, g

    def cost(self, x: NavState, lm=None) -> float:
        d = self._delta(x, lm)
        return float(d @ self._info @ d + 2.0 * d @ self._b + self._c)

    def residual(self, x: NavState, lm=None) -> np.ndarray:
        return self.U @ self._delta(x, lm) + self.r0


@dataclass
class ImuFactor:
    delta: PreintegratedDelta
    sqrt_info: np.ndarray
    locked: bool = False


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    cost_by_type: dict
    converged: bool
    reason: str
    final_lambda: float

    def to_dict(self) -> dict:
        return asdict(self)


def _imu_sqrt_info(cov: np.ndarray, lock_info: float | None) -> np.ndarray:
    cov = cov.copy()
    if lock_info is not None:
        cov[BA.start:, :] = 0.0
        cov[:, BA.start:] = 0.0
        cov[BA.start:, BA.start:] = np.eye(6) / lock_info
    # information = U^T U with U = L^-1 for cov = L L^T
    L = np.linalg.cholesky(cov + 1e-300 * np.eye(15))
    return np.linalg.inv(L)


def _whitened_prior(mean: NavState, sigmas) -> LinearPrior:
    s = np.repeat(np.asarray(sigmas, float), 3)
    return LinearPrior(mean.copy(), np.diag(1.0 / s), np.zeros(15))


class Window:
    """States, landmarks and factors of the sliding window (single writer)."""

    def __init__(self, settings: EstimatorSettings | None = None, rig: CameraRig | None = None):
        self.settings = settings or EstimatorSettings()
        self.rig = rig or CameraRig()
        self.keyframes: list[int] = []
        self.times: list[float] = []
        self.states: list[NavState] = []
        self.imu_factors: list[ImuFactor] = []          # imu_factors[i] joins states i, i+1
        self.obs: list[tuple[np.ndarray, np.ndarray]] = []
        self.bias_factors: dict[int, BiasEstimate] = {}  # keyed by keyframe index
        self.landmarks: dict[int, np.ndarray] = {}
        self.prior: LinearPrior | None = None
        self.optimized = False

    def __len__(self) -> int:
        return len(self.states)

    # ------------------------------------------------------------ building
    def initialize(self, keyframe: int, t: float, state: NavState, lm_ids, uv,
                   bias_estimate: BiasEstimate | None = None, prior: LinearPrior | None = None):
        if self.states:
            raise OrderingError("window already initialized")
        self.prior = prior or _whitened_prior(state, self.settings.prior_sigmas)
        self._append(keyframe, t, state.copy(), lm_ids, uv, bias_estimate)

    def add_keyframe(self, keyframe: int, t: float, delta: PreintegratedDelta, lm_ids, uv,
                     bias_estimate: BiasEstimate | None = None, lock_bias: bool = False):
        if not self.states:
            raise OrderingError("add_keyframe before the first keyframe was initialized")
        if keyframe <= self.keyframes[-1]:
            raise OrderingError(f"keyframe {keyframe} does not follow {self.keyframes[-1]}")
        prev = self.states[-1]
        dR, dv, dp = bias_correct(delta, prev.ba, prev.bg)
        dt = delta.dt_total
        R = prev.R @ dR
        v_world = prev.R @ prev.v + GRAVITY * dt + prev.R @ dv
        p = prev.p + prev.R @ prev.v * dt + 0.5 * GRAVITY * dt * dt + prev.R @ dp
        new = NavState(R, p, R.T @ v_world, prev.ba.copy(), prev.bg.copy())
        lock = self.settings.bias_lock_info if lock_bias else None
        self.imu_factors.append(ImuFactor(delta, _imu_sqrt_info(delta.cov, lock), lock_bias))
        self._append(keyframe, t, new, lm_ids, uv, bias_estimate)

    def _append(self, keyframe, t, state, lm_ids, uv, bias_estimate):
        lm_ids = np.asarray(lm_ids, dtype=np.int64)
        uv = np.asarray(uv, float).reshape(-1, 3)
        self.keyframes.append(keyframe)
        self.times.append(float(t))
        self.states.append(state)
        self.obs.append((lm_ids, uv))
        if bias_estimate is not None:
            self.bias_factors[keyframe] = bias_estimate
        fresh = [i for i, lid in enumerate(lm_ids) if int(lid) not in self.landmarks]
        if fresh:
            pts = self.rig.triangulate(state.R, state.p, uv[fresh])
            for i, m in zip(fresh, pts):
                self.landmarks[int(lm_ids[i])] = m

    # --------------------------------------------------------- evaluation
    def _observation_arrays(self):
        lm_index = {lid: i for i, lid in enumerate(self.landmarks)}
        ks, ls, uvs = [], [], []
        for k, (ids, uv) in enumerate(self.obs):
            if len(ids) == 0:
                continue
            ks.append(np.full(len(ids), k))
            ls.append(np.fromiter((lm_index[int(i)] for i in ids), dtype=np.int64, count=len(ids)))
            uvs.append(uv)
        if not ks:
            return np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3)), list(lm_index)
        return np.concatenate(ks), np.concatenate(ls), np.concatenate(uvs), list(lm_index)

    def _stereo_eval(self, states, lm, k_o, l_o, uv_o):
        R = np.stack([s.R for s in states])[k_o]
        p = np.stack([s.p for s in states])[k_o]
        r, J_rot, J_pos, J_lm, valid = stereo_residuals(self.rig, R, p, lm[l_o], uv_o)
        sq = np.einsum("ni,ni->n", r, r) / self.settings.pixel_sigma ** 2
        return r, J_rot, J_pos, J_lm, valid, sq

    def _prior_positions(self, lm_ids) -> np.ndarray:
        pos = {lid: i for i, lid in enumerate(lm_ids)}
        return np.array([pos[i] for i in self.prior.lm_ids], dtype=np.int64)

    def _imu_stack(self):
        if not self.imu_factors:
            return None
        return (DeltaStack.of([f.delta for f in self.imu_factors]),
                np.stack([f.sqrt_info for f in self.imu_factors]))

    def _imu_terms(self, states, imu_stack, jacobians):
        ds, U = imu_stack
        X = [np.stack(a) for a in zip(*(s.as_tuple() for s in states))]
        r, Ji, Jj = imu_residuals(ds, *(a[:-1] for a in X), *(a[1:] for a in X), jacobians=jacobians)
        return np.einsum("nij,nj->ni", U, r), Ji, Jj

    def cost(self, states=None, lm=None, obs_arrays=None, imu_stack=None) -> dict:
        """Per-factor-type robust cost at the given (default: current) estimate."""
        states = self.states if states is None else states
        if imu_stack is None:
            imu_stack = self._imu_stack()
        if obs_arrays is None:
            obs_arrays = self._observation_arrays()
        k_o, l_o, uv_o, lm_ids = obs_arrays
        if lm is None:
            lm = np.array([self.landmarks[i] for i in lm_ids]).reshape(-1, 3)
        out = {"prior": 0.0, "imu": 0.0, "stereo": 0.0, "deep_bias": 0.0}
        out["prior"] = self.prior.cost(states[0], lm[self._prior_positions(lm_ids)])
        if imu_stack is not None:
            rw, _, _ = self._imu_terms(states, imu_stack, False)
            out["imu"] = float(np.sum(rw * rw))
        if len(k_o):
            *_, valid, sq = self._stereo_eval(states, lm, k_o, l_o, uv_o)
            out["stereo"] = float(np.sum(dcs_cost(sq[valid], self.settings.dcs_phi)))
        sa, sg = deep_bias_sqrt_info(self.settings.deep_bias_accel_var, self.settings.deep_bias_gyro_var)
        for k, est in self._bias_factor_items():
            s = states[k]
            out["deep_bias"] += float(sa * sa * np.sum((s.ba - est.accel_bias_hat) ** 2)
                                      + sg * sg * np.sum((s.bg - est.gyro_bias_hat) ** 2))
        return out

    def _bias_factor_items(self):
        pos = {kf: i for i, kf in enumerate(self.keyframes)}
        return [(pos[kf], est) for kf, est in self.bias_factors.items() if kf in pos]

    # ------------------------------------------------------------- solving
    def _linearize(self, obs_arrays, lm, dense, imu_stack):
        """Normal equations ``H dx = -g``.

        The reduced system holds all states followed by the ``dense``
        landmarks (those under the marginalization prior, in prior order);
        the remaining landmarks are returned as ``V, gl, W`` blocks for
        Schur elimination.
        """
        st = self.settings
        K = len(self.states)
        nS = 15 * K
        Ld = len(dense)
        n = nS + 3 * Ld
        H = np.zeros((n, n))
        g = np.zeros(n)
        Hp, gp = self.prior.normal_equations(self.states[0], lm[dense])
        H[:15, :15] += Hp[:15, :15]
        H[:15, nS:] += Hp[:15, 15:]
        H[nS:, :15] += Hp[15:, :15]
        H[nS:, nS:] += Hp[15:, 15:]
        g[:15] += gp[:15]
        g[nS:] += gp[15:]
        if imu_stack is not None:
            rw, Ji, Jj = self._imu_terms(self.states, imu_stack, True)
            A = imu_stack[1] @ np.concatenate([Ji, Jj], axis=2)      # (M, 15, 30)
            AtA = np.einsum("nji,njk->nik", A, A)
            Atr = np.einsum("nji,nj->ni", A, rw)
            for i in range(len(A)):
                sl = slice(15 * i, 15 * i + 30)
                H[sl, sl] += AtA[i]
                g[sl] += Atr[i]
        sa, sg = deep_bias_sqrt_info(st.deep_bias_accel_var, st.deep_bias_gyro_var)
        for k, est in self._bias_factor_items():
            s = self.states[k]
            o = 15 * k
            H[o + 9:o + 12, o + 9:o + 12] += sa * sa * np.eye(3)
            H[o + 12:o + 15, o + 12:o + 15] += sg * sg * np.eye(3)
            g[o + 9:o + 12] += sa * sa * (s.ba - est.accel_bias_hat)
            g[o + 12:o + 15] += sg * sg * (s.bg - est.gyro_bias_hat)

        k_o, l_o, uv_o, _ = obs_arrays
        L = len(lm)
        V = np.zeros((L, 3, 3))
        gl = np.zeros((L, 3))
        W = np.zeros((K, 6, L, 3))
        if len(k_o):
            r, J_rot, J_pos, J_lm, valid, sq = self._stereo_eval(self.states, lm, k_o, l_o, uv_o)
            w = dcs_scale(sq, st.dcs_phi) ** 2 / st.pixel_sigma ** 2 * valid
            Js = np.concatenate([J_rot, J_pos], axis=2)                 # (N, 3, 6)
            wJs = Js * w[:, None, None]
            wJl = J_lm * w[:, None, None]
            Hss = np.einsum("nij,nik->njk", wJs, Js)
            gs = np.einsum("nij,ni->nj", wJs, r)
            N = len(k_o)
            by_kf = csr_matrix((np.ones(N), (k_o, np.arange(N))), shape=(K, N))
            by_lm = csr_matrix((np.ones(N), (l_o, np.arange(N))), shape=(L, N))
            Hpp = (by_kf @ Hss.reshape(N, 36)).reshape(K, 6, 6)
            gpp = by_kf @ gs
            for k in range(K):
                idx = 15 * k + _POSE_COLS
                H[np.ix_(idx, idx)] += Hpp[k]
                g[idx] += gpp[k]
            V = (by_lm @ np.einsum("nij,nik->njk", wJl, J_lm).reshape(N, 9)).reshape(L, 3, 3)
            gl = by_lm @ np.einsum("nij,ni->nj", wJl, r)
            # a keyframe observes a landmark at most once, so plain assignment suffices
            W[k_o, :, l_o, :] = np.einsum("nij,nik->njk", wJs, J_lm)
        if Ld:
            rows = nS + 3 * np.arange(Ld)[:, None, None] + np.arange(3)[None, :, None]
            H[rows, rows.transpose(0, 2, 1)] += V[dense]
            g[nS:] += gl[dense].ravel()
            pose_idx = (15 * np.arange(K)[:, None] + _POSE_COLS[None, :]).ravel()
            cross = W[:, :, dense, :].reshape(6 * K, 3 * Ld)
            H[pose_idx, nS:] += cross
            H[nS:, pose_idx] += cross.T
        sparse = np.setdiff1d(np.arange(L), dense)
        return H, g, V[sparse], gl[sparse], W[:, :, sparse, :], sparse

    def _solve(self, H, g, V, gl, W, lam):
        """Damped step ``(dx, dl_sparse)``; ``dx`` covers the reduced system."""
        K = len(self.states)
        L = len(V)
        Hd = H + lam * np.diag(np.diag(H))
        rhs = -g
        if L:
            dV = np.einsum("lii->li", V)
            Vd = V + lam * np.einsum("li,ij->lij", dV, np.eye(3))
            Vinv = np.linalg.inv(Vd)
            W2 = W.reshape(K * 6, L, 3)
            WVi = np.einsum("ilj,ljk->ilk", W2, Vinv).reshape(K * 6, 3 * L)
            S = WVi @ W2.reshape(K * 6, 3 * L).T
            idx = (15 * np.arange(K)[:, None] + _POSE_COLS[None, :]).ravel()
            Hd[np.ix_(idx, idx)] -= S
            rhs = rhs.copy()
            rhs[idx] += WVi @ gl.ravel()
        c = cho_factor(Hd, lower=False, check_finite=False)
        dx = cho_solve(c, rhs, check_finite=False)
        if not L:
            return dx, np.zeros((0, 3))
        dxp = dx[idx].reshape(K, 6)
        Wt_dx = np.einsum("kjlc,kj->lc", W, dxp)
        dl = -np.einsum("lij,lj->li", Vinv, gl + Wt_dx)
        return dx, dl

    def optimize(self, max_iterations: int | None = None) -> SolveReport:
        """Levenberg-Marquardt with Marquardt (diagonal) damping.

        Raises:
            StateError: empty window.
            NonFiniteCostError: cost became NaN/inf.
            SingularSystemError: damping exceeded ``lambda_max``.
        """
        if not self.states:
            raise StateError("optimize on an empty window")
        st = self.settings
        max_it = st.max_iterations if max_iterations is None else max_iterations
        obs_arrays = self._observation_arrays()
        lm_ids = obs_arrays[3]
        lm = np.array([self.landmarks[i] for i in lm_ids]).reshape(-1, 3)
        dense = self._prior_positions(lm_ids)
        nS = 15 * len(self.states)
        imu_stack = self._imu_stack()
        costs = self.cost(obs_arrays=obs_arrays, lm=lm, imu_stack=imu_stack)
        cost = sum(costs.values())
        self._check_finite(cost, costs)
        initial = cost
        lam = st.lambda_init
        reason = "max_iterations"
        converged = False
        it = 0
        while it < max_it:
            it += 1
            H, g, V, gl, W, sparse = self._linearize(obs_arrays, lm, dense, imu_stack)
            while True:
                try:
                    dx, dl_sparse = self._solve(H, g, V, gl, W, lam)
                    ok = np.all(np.isfinite(dx)) and np.all(np.isfinite(dl_sparse))
                except np.linalg.LinAlgError:
                    ok = False
                if ok:
                    dl = np.zeros_like(lm)
                    dl[sparse] = dl_sparse
                    dl[dense] = dx[nS:].reshape(-1, 3)
                    new_states = [s.retract(dx[15 * k:15 * k + 15]) for k, s in enumerate(self.states)]
                    new_lm = lm + dl
                    new_costs = self.cost(new_states, new_lm, obs_arrays, imu_stack)
                    new_cost = sum(new_costs.values())
                    if np.isfinite(new_cost) and new_cost <= cost:
                        break
                lam *= st.lambda_factor
                if lam > st.lambda_max:
                    if not ok:
                        raise SingularSystemError("normal equations singular beyond maximum damping")
                    reason = "lambda_max"
                    dx = None
                    break
            if dx is None:
                converged = True
                break
            decrease = cost - new_cost
            self.states, lm, cost, costs = new_states, new_lm, new_cost, new_costs
            lam = max(lam / st.lambda_factor, 1e-12)
            step = np.sqrt(dx[:nS] @ dx[:nS] + np.sum(dl * dl))
            if step < st.step_tol:
                reason, converged = "step", True
                break
            if decrease < st.cost_tol * max(cost, 1.0):
                reason, converged = "cost", True
                break
        for i, lid in enumerate(lm_ids):
            self.landmarks[lid] = lm[i]
        self.optimized = True
        return SolveReport(it, float(initial), float(cost), costs, converged, reason, float(lam))

    def _check_finite(self, cost, costs):
        if not np.isfinite(cost):
            log.error("non-finite cost breakdown: %s", costs)
            for k, s in zip(self.keyframes, self.states):
                log.error("state %d: p=%s v=%s ba=%s bg=%s", k, s.p, s.v, s.ba, s.bg)
            raise NonFiniteCostError(f"non-finite cost: {costs}")

    # ------------------------------------------------------ marginalization
    def marginalize_oldest(self) -> tuple[int, NavState] | None:
        """Drop the oldest state if the window is full; returns ``(keyframe, state)`` removed.

        Every factor touching the oldest state is linearized at the current
        estimate. The oldest state and the landmarks no surviving keyframe
        observes are eliminated; what remains becomes the new prior on the
        next state and the still-shared landmarks.
        """
        if len(self.states) < self.settings.window_size or len(self.states) < 2:
            return None
        st = self.settings
        x0, x1 = self.states[0], self.states[1]
        ids0, uv0 = self.obs[0]
        later = set()
        for ids, _ in self.obs[1:]:
            later.update(int(i) for i in ids)
        # landmark variables involved: prior landmarks first (prior order), then new ones
        involved = list(self.prior.lm_ids)
        seen = set(involved)
        for i in ids0:
            if int(i) not in seen:
                seen.add(int(i))
                involved.append(int(i))
        col = {lid: 30 + 3 * j for j, lid in enumerate(involved)}
        n = 30 + 3 * len(involved)
        H = np.zeros((n, n))
        g = np.zeros(n)

        P = len(self.prior.lm_ids)
        Hp, gp = self.prior.normal_equations(
            x0, np.array([self.landmarks[i] for i in self.prior.lm_ids]).reshape(-1, 3))
        pc = np.concatenate([np.arange(15), 30 + np.arange(3 * P)])
        H[np.ix_(pc, pc)] += Hp
        g[pc] += gp
        f = self.imu_factors[0]
        r, Ji, Jj = imu_residual(f.delta, *x0.as_tuple(), *x1.as_tuple())
        A = f.sqrt_info @ np.hstack([Ji, Jj])
        rw = f.sqrt_info @ r
        H[:30, :30] += A.T @ A
        g[:30] += A.T @ rw
        est = self.bias_factors.get(self.keyframes[0])
        if est is not None:
            sa, sg = deep_bias_sqrt_info(st.deep_bias_accel_var, st.deep_bias_gyro_var)
            H[9:12, 9:12] += sa * sa * np.eye(3)
            H[12:15, 12:15] += sg * sg * np.eye(3)
            g[9:12] += sa * sa * (x0.ba - est.accel_bias_hat)
            g[12:15] += sg * sg * (x0.bg - est.gyro_bias_hat)
        if len(ids0):
            m = len(ids0)
            lm = np.array([self.landmarks[int(i)] for i in ids0])
            rr, J_rot, J_pos, J_lm, valid = stereo_residuals(
                self.rig, np.repeat(x0.R[None], m, 0), np.repeat(x0.p[None], m, 0), lm, uv0)
            sq = np.einsum("ni,ni->n", rr, rr) / st.pixel_sigma ** 2
            w = dcs_scale(sq, st.dcs_phi) ** 2 / st.pixel_sigma ** 2 * valid
            Js = np.concatenate([J_rot, J_pos], axis=2)
            H[np.ix_(_POSE_COLS, _POSE_COLS)] += np.einsum("nij,nik,n->jk", Js, Js, w)
            g[_POSE_COLS] += np.einsum("nij,ni,n->j", Js, rr, w)
            Wl = np.einsum("nij,nik,n->njk", Js, J_lm, w)
            Vl = np.einsum("nij,nik,n->njk", J_lm, J_lm, w)
            gl = np.einsum("nij,ni,n->nj", J_lm, rr, w)
            for q, lid in enumerate(ids0):
                c = col[int(lid)]
                H[_POSE_COLS, c:c + 3] += Wl[q]
                H[c:c + 3, _POSE_COLS] += Wl[q].T
                H[c:c + 3, c:c + 3] += Vl[q]
                g[c:c + 3] += gl[q]

        gone = [lid for lid in involved if lid not in later]
        kept = [lid for lid in involved if lid in later]
        e_idx = np.concatenate([np.arange(15)] + [col[l] + np.arange(3) for l in gone])
        k_idx = np.concatenate([np.arange(15, 30)] + [col[l] + np.arange(3) for l in kept])
        Hee = H[np.ix_(e_idx, e_idx)]
        Hee += 1e-9 * np.diag(np.maximum(np.diag(Hee), 1.0))
        Hke = H[np.ix_(k_idx, e_idx)]
        X = np.linalg.solve(Hee, np.column_stack([Hke.T, g[e_idx]]))
        Hs = H[np.ix_(k_idx, k_idx)] - Hke @ X[:, :-1]
        gs = g[k_idx] - Hke @ X[:, -1]
        Hs = 0.5 * (Hs + Hs.T)
        # Jacobi scaling first: bias and landmark blocks differ by ~10 orders of magnitude
        d = 1.0 / np.sqrt(np.maximum(np.diag(Hs), 1e-300))
        evals, evecs = np.linalg.eigh(d[:, None] * Hs * d[None, :])
        keep = evals > 1e-12 * evals.max()
        evals, evecs = evals[keep], evecs[:, keep]
        U = np.sqrt(evals)[:, None] * evecs.T / d[None, :]
        r0 = (evecs.T @ (d * gs)) / np.sqrt(evals)
        # U was built at the current estimate, so the prior's delta is zero there
        self.prior = LinearPrior(x1.copy(), U, r0, kept,
                                 np.array([self.landmarks[l] for l in kept]).reshape(-1, 3))

        self.bias_factors.pop(self.keyframes[0], None)
        for lid in gone:
            self.landmarks.pop(lid, None)
        removed = (self.keyframes.pop(0), self.states.pop(0))
        self.times.pop(0)
        self.imu_factors.pop(0)
        self.obs.pop(0)
        return removed

    def prior_covariance(self) -> np.ndarray:
        """Covariance implied by the current prior (pseudo-inverse if rank-deficient)."""
        U = self.prior.U
        return np.linalg.pinv(U.T @ U, hermitian=True)

    def feed_back_bias(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.states:
            raise StateError("no states in the window")
        s = self.states[-1]
        return s.ba.copy(), s.bg.copy()


# ---------------------------------------------------------------- runner

@dataclass
class VioResult:
    t: np.ndarray
    keyframe: np.ndarray
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray
    online_ba: np.ndarray
    online_bg: np.ndarray
    reports: list = field(default_factory=list)
    runtime: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz",
                        "bax", "bay", "baz", "bgx", "bgy", "bgz"])
            for k in range(len(self.t)):
                row = [self.t[k], *matrix_to_quat(self.R[k]), *self.p[k], *self.v[k],
                       *self.ba[k], *self.bg[k]]
                w.writerow([repr(float(x)) for x in row])

    def write_report(self, path) -> None:
        summary = {
            "keyframes": int(len(self.t)),
            "runtime_s": self.runtime,
            "mean_iterations": float(np.mean([r.iterations for r in self.reports])) if self.reports else 0.0,
            "final_cost_by_type": self.reports[-1].cost_by_type if self.reports else {},
            "reasons": {k: sum(r.reason == k for r in self.reports)
                        for k in {r.reason for r in self.reports}},
        }
        Path(path).write_text(json.dumps(summary, indent=2))


BiasProvider = Callable[[int, float, "Window"], "BiasEstimate | None"]


def run_vio(data, settings: EstimatorSettings | None = None, bias_provider: BiasProvider | None = None,
            lock_windows=(), initial_bias=None, max_iterations: int | None = None) -> VioResult:
    """Run the smoother over a simulated sequence.

    ``data`` is a :class:`~deepbias.simulator.SimData`. The first keyframe is
    anchored at the ground-truth pose and velocity; ``initial_bias`` (default:
    zeros) seeds the bias prior. States are recorded as they leave the window
    (fully smoothed), the rest at the end.
    """
    settings = settings or EstimatorSettings()
    tr, imu, vis = data.trajectory, data.imu, data.vision
    kf_idx = vis.keyframe_imu_index
    kf_t = vis.keyframe_times
    win = Window(settings, data.scenario.camera)
    ba0, bg0 = (np.zeros(3), np.zeros(3)) if initial_bias is None else map(np.asarray, initial_bias)
    i0 = kf_idx[0]
    x0 = NavState(tr.R[i0], tr.p[i0], tr.R[i0].T @ tr.v_world[i0], ba0, bg0)
    done: dict[int, NavState] = {}
    online = np.zeros((len(kf_idx), 6))
    reports = []
    t_start = time.perf_counter()

    def _locked(ta, tb):
        return any(ta < t1 and tb > t0 for t0, t1 in lock_windows)

    for k, i in enumerate(kf_idx):
        ids, uv = vis.for_keyframe(k)
        est = bias_provider(k, float(kf_t[k]), win) if (bias_provider and k > 0) else None
        if k == 0:
            win.initialize(k, kf_t[k], x0, ids, uv, est)
        else:
            j = kf_idx[k - 1]
            ba, bg = win.feed_back_bias()
            delta = integrate(imu.t[j:i], imu.accel[j:i], imu.gyro[j:i], ba, bg,
                              settings.imu_noise, t_end=imu.t[i])
            old = win.marginalize_oldest()
            if old is not None:
                done[old[0]] = old[1]
            win.add_keyframe(k, kf_t[k], delta, ids, uv, est, lock_bias=_locked(kf_t[k - 1], kf_t[k]))
        rep = win.optimize(max_iterations)
        reports.append(rep)
        online[k] = np.concatenate(win.feed_back_bias())
    for kf, s in zip(win.keyframes, win.states):
        done[kf] = s
    order = sorted(done)
    S = [done[k] for k in order]
    return VioResult(kf_t[order], np.array(order), np.stack([s.R for s in S]), np.stack([s.p for s in S]),
                     np.stack([s.v for s in S]), np.stack([s.ba for s in S]), np.stack([s.bg for s in S]),
                     online[:, :3], online[:, 3:], reports, time.perf_counter() - t_start)


def run_batch(data, settings: EstimatorSettings | None = None, max_iterations: int = 50,
              refine_every: int = 10) -> VioResult:
    """Full-batch smoother over the whole sequence (no marginalization).

    Used as the reference the fixed-lag result is compared against; every
    ``refine_every`` keyframes a few iterations keep the growing problem
    near its optimum so the final solve starts close.
    """
    base = settings or EstimatorSettings()
    settings = EstimatorSettings(**{**base.__dict__, "window_size": 10 ** 9})
    tr, imu, vis = data.trajectory, data.imu, data.vision
    kf_idx, kf_t = vis.keyframe_imu_index, vis.keyframe_times
    win = Window(settings, data.scenario.camera)
    i0 = kf_idx[0]
    t_start = time.perf_counter()
    reports = []
    for k, i in enumerate(kf_idx):
        ids, uv = vis.for_keyframe(k)
        if k == 0:
            win.initialize(k, kf_t[k], NavState(tr.R[i0], tr.p[i0], tr.R[i0].T @ tr.v_world[i0],
                                                np.zeros(3), np.zeros(3)), ids, uv)
            continue
        j = kf_idx[k - 1]
        ba, bg = win.states[-1].ba, win.states[-1].bg
        win.add_keyframe(k, kf_t[k], integrate(imu.t[j:i], imu.accel[j:i], imu.gyro[j:i], ba, bg,
                                               settings.imu_noise, t_end=imu.t[i]), ids, uv)
        if k % refine_every == 0:
            reports.append(win.optimize(3))
    reports.append(win.optimize(max_iterations))
    S = win.states
    bias = np.array([np.concatenate([s.ba, s.bg]) for s in S])
    return VioResult(kf_t.copy(), np.arange(len(S)), np.stack([s.R for s in S]), np.stack([s.p for s in S]),
                     np.stack([s.v for s in S]), bias[:, :3], bias[:, 3:], bias[:, :3], bias[:, 3:],
                     reports, time.perf_counter() - t_start)
