import math

import numpy as np
import pytest

from cfvo import geometry as geo
from cfvo.geometry import CalibrationSet, CameraIntrinsics, Pose, PoseDomainError


def random_twist(rng, scale=0.8):
    tw = rng.normal(0.0, scale, 6)
    while np.linalg.norm(tw[3:]) >= math.pi - 1e-3:
        tw = rng.normal(0.0, scale, 6)
    return tw


def test_exp_zero_twist_is_identity():
    pose = geo.se3_exp(np.zeros(6))
    assert np.allclose(pose.rotation, np.eye(3))
    assert np.allclose(pose.translation, 0.0)


def test_exp_pure_z_rotation():
    pose = geo.se3_exp([0, 0, 0, 0, 0, math.pi / 2])
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.abs(pose.rotation - expected).max() < 1e-12
    assert np.abs(pose.translation).max() < 1e-12


def test_log_identity_and_z_rotation():
    assert np.abs(geo.se3_log(Pose.identity())).max() == 0.0
    tw = geo.se3_log(geo.se3_exp([0, 0, 0, 0, 0, math.pi / 2]))
    assert np.abs(tw - [0, 0, 0, 0, 0, math.pi / 2]).max() < 1e-12


def test_exp_log_round_trip_1000_random_twists():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        tw = random_twist(rng)
        back = geo.se3_log(geo.se3_exp(tw))
        worst = max(worst, float(np.abs(back - tw).max()))
    assert worst < 1e-9


def test_log_near_pi_raises():
    pose = geo.se3_exp([0, 0, 0, 0, 0, math.pi - 1e-9])
    with pytest.raises(PoseDomainError):
        geo.se3_log(pose)


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(1)
    a = geo.se3_exp(random_twist(rng))
    b = geo.se3_exp(random_twist(rng))
    assert np.allclose(geo.compose(Pose.identity(), b).matrix(), b.matrix())
    double_inv = geo.inverse(geo.inverse(a))
    assert np.abs(double_inv.matrix() - a.matrix()).max() < 1e-12
    ident = geo.compose(a, geo.inverse(a))
    assert np.abs(ident.matrix() - np.eye(4)).max() < 1e-9


def test_associativity_on_random_triples():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b, c = (geo.se3_exp(random_twist(rng)) for _ in range(3))
        lhs = geo.compose(geo.compose(a, b), c).matrix()
        rhs = geo.compose(a, geo.compose(b, c)).matrix()
        assert np.abs(lhs - rhs).max() < 1e-10


def test_apply_is_group_action():
    rng = np.random.default_rng(3)
    a = geo.se3_exp(random_twist(rng))
    b = geo.se3_exp(random_twist(rng))
    p = rng.normal(0, 2, 3)
    lhs = geo.apply(geo.compose(a, b), p)
    rhs = geo.apply(a, geo.apply(b, p))
    assert np.abs(lhs - rhs).max() < 1e-10


def test_so3_closure_over_many_compositions():
    rng = np.random.default_rng(4)
    pose = Pose.identity()
    for _ in range(10_000):
        pose = geo.compose(pose, geo.se3_exp(rng.normal(0, 0.05, 6)))
    assert pose.orthonormality_defect() < 1e-9


def test_adjoint_identity():
    rng = np.random.default_rng(5)
    t = geo.se3_exp(random_twist(rng, 0.5))
    xi = random_twist(rng, 0.3)
    lhs = geo.se3_exp(geo.se3_adjoint(t) @ xi).matrix()
    rhs = t.matrix() @ geo.se3_exp(xi).matrix() @ geo.inverse(t).matrix()
    assert np.abs(lhs - rhs).max() < 1e-9


INTR = CameraIntrinsics(fx=96.0, fy=96.0, cx=95.5, cy=31.5, width=192, height=64)


def test_warp_identity_is_exact():
    p = np.array([[10.0, 20.0], [95.5, 31.5], [191.0, 63.0]])
    out, z = geo.warp_pixel(p, np.array([3.0, 5.0, 7.0]), INTR, Pose.identity())
    assert np.array_equal(out, p)
    assert np.array_equal(z, [3.0, 5.0, 7.0])


def test_warp_on_axis_translation():
    pose = Pose(np.eye(3), np.array([0.0, 0.0, -1.0]))
    out, z = geo.warp_pixel(np.array([95.5, 31.5]), 5.0, INTR, pose)
    assert np.abs(out - [95.5, 31.5]).max() < 1e-12
    assert abs(z - 4.0) < 1e-12


def test_warp_round_trip_random():
    rng = np.random.default_rng(6)
    for _ in range(200):
        p = np.array([rng.uniform(5, 186), rng.uniform(5, 58)])
        depth = rng.uniform(2.0, 10.0)
        pose = geo.se3_exp(np.concatenate([rng.normal(0, 0.1, 3),
                                           rng.normal(0, 0.02, 3)]))
        fwd, z1 = geo.warp_pixel(p, depth, INTR, pose)
        assert z1 > 0
        back, z2 = geo.warp_pixel(fwd, z1, INTR, geo.inverse(pose))
        assert np.abs(back - p).max() < 1e-8
        assert abs(z2 - depth) < 1e-8


def test_warp_behind_camera_flags_negative_depth():
    pose = Pose(np.eye(3), np.array([0.0, 0.0, -10.0]))
    _, z = geo.warp_pixel(np.array([95.5, 31.5]), 5.0, INTR, pose)
    assert z < 0  # caller masks, no exception


def make_simple_calib(intr=INTR):
    p2 = np.zeros((3, 4))
    p2[:3, :3] = intr.matrix()
    return CalibrationSet(p_c2=p2, t_rect_c0=np.eye(4), t_c0_v=np.eye(4))


def test_project_lidar_on_axis_point():
    calib = make_simple_calib()
    sparse = geo.project_lidar(np.array([[0.0, 0.0, 5.0]]), calib, 192, 64)
    # principal point (95.5, 31.5) snaps to pixel (96, 32) by rint
    assert sparse.n_valid == 1
    v, u = np.argwhere(sparse.mask)[0]
    assert (u, v) == (96, 32)
    assert sparse.depth[v, u] == 5.0


def test_project_lidar_discards_behind_camera():
    calib = make_simple_calib()
    sparse = geo.project_lidar(np.array([[0.0, 0.0, -1.0]]), calib, 192, 64)
    assert sparse.n_valid == 0


def test_project_lidar_z_buffer_keeps_nearest():
    calib = make_simple_calib()
    pts = np.array([[0.0, 0.0, 7.0], [0.0, 0.0, 4.0]])
    sparse = geo.project_lidar(pts, calib, 192, 64)
    assert sparse.n_valid == 1
    assert sparse.depth[sparse.mask][0] == 4.0


def test_project_lidar_matches_brute_force():
    # brute-force oracle: per-pixel nearest contributing point
    rng = np.random.default_rng(7)
    calib = make_simple_calib()
    pts = np.column_stack([
        rng.uniform(-4, 4, 800), rng.uniform(-1.5, 1.5, 800),
        rng.uniform(0.5, 12.0, 800)])
    sparse = geo.project_lidar(pts, calib, 192, 64)

    best = {}
    m = calib.velo_to_image()
    for p in pts:
        q = m @ np.array([p[0], p[1], p[2], 1.0])
        if q[2] <= 0:
            continue
        u = int(np.rint(q[0] / q[2]))
        v = int(np.rint(q[1] / q[2]))
        if not (0 <= u < 192 and 0 <= v < 64):
            continue
        key = (v, u)
        if key not in best or q[2] < best[key]:
            best[key] = q[2]
    assert sparse.n_valid == len(best)
    for (v, u), z in best.items():
        assert sparse.mask[v, u]
        assert abs(sparse.depth[v, u] - z) < 1e-12


def test_project_lidar_empty_cloud():
    calib = make_simple_calib()
    sparse = geo.project_lidar(np.zeros((0, 3)), calib, 192, 64)
    assert sparse.n_valid == 0


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1.0, fy=1.0, cx=1.0, cy=1.0, width=4, height=4)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1.0, fy=1.0, cx=9.0, cy=1.0, width=4, height=4)


def test_calibration_validation():
    bad_rect = np.eye(4)
    bad_rect[3, 0] = 0.5
    with pytest.raises(ValueError):
        CalibrationSet(p_c2=np.zeros((3, 4)), t_rect_c0=bad_rect, t_c0_v=np.eye(4))
    skewed = np.eye(4)
    skewed[0, 1] = 0.1  # not orthonormal
    with pytest.raises(ValueError):
        CalibrationSet(p_c2=np.zeros((3, 4)), t_rect_c0=np.eye(4), t_c0_v=skewed)


def test_calibration_text_round_trip_is_bit_exact():
    rng = np.random.default_rng(8)
    w = rng.normal(0, 0.3, 3)
    calib = CalibrationSet(
        p_c2=rng.normal(0, 100, (3, 4)),
        t_rect_c0=np.eye(4),
        t_c0_v=geo.se3_exp(np.concatenate([rng.normal(0, 1, 3), w])).matrix(),
    )
    text = geo.format_calibration(calib)
    parsed = geo.parse_calibration(text)
    assert np.array_equal(parsed.p_c2, calib.p_c2)
    assert np.array_equal(parsed.t_rect_c0, calib.t_rect_c0)
    assert np.array_equal(parsed.t_c0_v, calib.t_c0_v)
    assert geo.format_calibration(parsed) == text


def test_parse_calibration_accepts_kitti_key_variants():
    text = ("P2: 10.0 0.0 5.0 0.0 0.0 10.0 5.0 0.0 0.0 0.0 1.0 0.0\n"
            "R_rect: 1.0 0.0 0.0 0.0 1.0 0.0 0.0 0.0 1.0\n"
            "Tr: 1.0 0.0 0.0 0.1 0.0 1.0 0.0 0.2 0.0 0.0 1.0 0.3\n")
    calib = geo.parse_calibration(text)
    assert calib.t_c0_v[0, 3] == 0.1


def test_parse_calibration_rejects_wrong_counts():
    with pytest.raises(ValueError):
        geo.parse_calibration("P2: 1.0 2.0\nR0_rect: " + "1.0 " * 9 +
                              "\nTr_velo_to_cam: " + "1.0 " * 12)
