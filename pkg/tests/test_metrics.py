import numpy as np
import pytest

from deepbias.liealg import so3_exp
from deepbias.metrics import (
    AlignmentError, InsufficientLengthError, Poses, ate, drift_rate, path_length, rpe, umeyama,
)


def _line_traj(n=60, step=0.5, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n) * 0.1
    p = np.column_stack([np.arange(n) * step, np.sin(np.arange(n) * 0.3), 0.2 * np.cos(np.arange(n) * 0.2)])
    R = np.stack([so3_exp(rng.normal(size=3) * 0.3) for _ in range(n)])
    return Poses(t, R, p)


def test_identical_trajectories_have_zero_error():
    gt = _line_traj()
    rep = rpe(gt, gt, 5.0)
    assert rep.count > 0 and rep.mean == 0.0 and rep.rot_mean == 0.0
    assert ate(gt, gt) < 1e-12


def test_rpe_invariant_to_global_rigid_motion():
    gt = _line_traj()
    G = so3_exp([0.1, -0.4, 2.0])
    est = Poses(gt.t, np.einsum("ij,njk->nik", G, gt.R), gt.p @ G.T + [3.0, -1.0, 7.0])
    assert rpe(est, gt, 5.0).mean < 1e-12
    assert rpe(Poses(gt.t, gt.R, gt.p + [1.0, 2.0, 3.0]), gt, 10.0).mean < 1e-12
    assert ate(est, gt) < 1e-12


def test_hand_built_three_pose_segment_error():
    t = np.array([0.0, 1.0, 2.0])
    R = np.stack([np.eye(3)] * 3)
    gt = Poses(t, R, np.array([[0.0, 0, 0], [5.0, 0, 0], [10.0, 0, 0]]))
    est = Poses(t, R, np.array([[0.0, 0, 0], [5.1, 0, 0], [10.2, 0, 0]]))
    rep = rpe(est, gt, 5.0)
    np.testing.assert_allclose(rep.trans, [0.1, 0.1])
    assert rep.mean == pytest.approx(0.1)


def test_rpe_needs_enough_path():
    gt = _line_traj(n=5, step=0.5)
    with pytest.raises(InsufficientLengthError):
        rpe(gt, gt, 5.0)


def test_single_offset_pose_gives_expected_ate():
    gt = _line_traj(n=100, step=0.2)
    est = Poses(gt.t, gt.R, gt.p.copy())
    est.p[50] += [0.0, 0.0, 0.3]
    assert ate(est, gt) == pytest.approx(np.sqrt(0.09 / 100), rel=0.01)


def test_alignment_degenerate_cases():
    with pytest.raises(AlignmentError):
        umeyama(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    with pytest.raises(AlignmentError):
        umeyama(line, line)


def test_umeyama_recovers_transform():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(20, 3))
    R = so3_exp([0.3, -0.2, 1.0])
    Rh, th = umeyama(src, src @ R.T + [1.0, 2.0, 3.0])
    np.testing.assert_allclose(Rh, R, atol=1e-12)
    np.testing.assert_allclose(th, [1.0, 2.0, 3.0], atol=1e-12)


def test_time_association_drops_far_pairs():
    gt = _line_traj()
    est = Poses(gt.t[::2] + 0.01, gt.R[::2], gt.p[::2])
    rep = rpe(est, gt, 5.0, max_dt=0.02)
    assert rep.mean < 1e-12


def test_drift_rate_is_ate_per_metre():
    gt = _line_traj(n=100, step=0.2)
    est = Poses(gt.t, gt.R, gt.p.copy())
    est.p[50] += [0.0, 0.0, 0.3]
    assert drift_rate(est, gt) == pytest.approx(ate(est, gt) / path_length(gt.p)[-1])
