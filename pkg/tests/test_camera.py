import numpy as np

from deepbias.camera import CameraRig, project_with_jacobians
from deepbias.liealg import so3_exp

from helpers import numerical_jacobian, rel_error


def _random_setup(rng, n=20):
    R = np.stack([so3_exp(rng.normal(scale=0.5, size=3)) for _ in range(n)])
    p = rng.normal(size=(n, 3))
    rig = CameraRig()
    # landmarks 3-10 m in front of each camera
    Xc = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(3, 10, n)])
    Xb = Xc @ rig.R_bc.T + rig.t_bc
    m = np.einsum("nij,nj->ni", R, Xb) + p
    return rig, R, p, m


def test_projection_matches_pinhole_formula():
    rig = CameraRig()
    Xc = np.array([[0.5, -0.2, 4.0]])
    uv = rig.project(Xc)[0]
    assert uv[0] == rig.f * 0.5 / 4.0 + rig.cx
    assert uv[1] == rig.f * (0.5 - rig.baseline) / 4.0 + rig.cx
    assert uv[2] == rig.f * -0.2 / 4.0 + rig.cy


def test_triangulation_inverts_projection():
    rng = np.random.default_rng(0)
    rig, R, p, m = _random_setup(rng)
    for k in range(len(p)):
        uv = rig.project(rig.world_to_camera(R[k], p[k], m[k:k + 1]))
        np.testing.assert_allclose(rig.triangulate(R[k], p[k], uv)[0], m[k], atol=1e-9)


def test_batched_jacobians_match_finite_differences():
    rng = np.random.default_rng(1)
    rig, R, p, m = _random_setup(rng, n=100)
    uv, J_rot, J_pos, J_lm, _ = project_with_jacobians(rig, R, p, m)
    worst = 0.0
    for k in range(len(p)):
        def f_rot(Rk):
            return rig.project(rig.world_to_camera(Rk, p[k], m[k:k + 1]))[0]
        num = numerical_jacobian(f_rot, R[k], lambda X, d: X @ so3_exp(d), 3)
        worst = max(worst, rel_error(num, J_rot[k]))
        num = numerical_jacobian(lambda pk: rig.project(rig.world_to_camera(R[k], pk, m[k:k + 1]))[0],
                                 p[k], lambda x, d: x + d, 3)
        worst = max(worst, rel_error(num, J_pos[k]))
        num = numerical_jacobian(lambda mk: rig.project(rig.world_to_camera(R[k], p[k], mk[None]))[0],
                                 m[k], lambda x, d: x + d, 3)
        worst = max(worst, rel_error(num, J_lm[k]))
    assert worst < 1e-5


def test_dict_round_trip():
    rig = CameraRig(f=400.0)
    again = CameraRig.from_dict(rig.to_dict())
    assert again.f == 400.0
    np.testing.assert_array_equal(again.t_bc, rig.t_bc)
