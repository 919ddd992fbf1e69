import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from lidarcam.geometry import (
    CalibrationError,
    InvalidRotationError,
    NoiseSpec,
    Pose,
    canonical_quat,
    compute_metrics,
    euler_zyx_to_matrix,
    make_initial,
    matrix_to_euler_zyx,
    matrix_to_quat,
    normalize_quat,
    quat_to_matrix,
    recover_extrinsic,
    sample_noise,
    supervision_target,
    rot_z,
)

from conftest import homog, poses, random_pose, unit_quats


def scipy_matrix(q):
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


# -- quaternions -------------------------------------------------------------


def test_identity_quat_is_identity_matrix():
    assert np.array_equal(quat_to_matrix([1, 0, 0, 0]), np.eye(3))


def test_quarter_turn_about_z():
    q = [0.70711, 0, 0, 0.70711]
    np.testing.assert_allclose(quat_to_matrix(q), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)


@given(unit_quats())
def test_quat_to_matrix_matches_scipy(q):
    np.testing.assert_allclose(quat_to_matrix(q), scipy_matrix(q), atol=1e-12)


@given(unit_quats())
def test_quat_to_matrix_sign_invariant(q):
    assert np.array_equal(quat_to_matrix(q), quat_to_matrix(-q))


def test_matrix_quat_round_trip(rng):
    for _ in range(1000):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        back = matrix_to_quat(quat_to_matrix(q))
        assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9
        assert back[0] >= 0


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-6))
def test_normalize_and_canonical(v):
    q = canonical_quat(v)
    assert abs(np.linalg.norm(q) - 1) < 1e-9
    assert q[0] >= 0
    assert abs(np.linalg.norm(normalize_quat(v)) - 1) < 1e-9


def test_zero_quat_rejected():
    with pytest.raises(InvalidRotationError):
        normalize_quat([0, 0, 0, 0])
    with pytest.raises(InvalidRotationError):
        Pose(np.zeros(4), np.zeros(3))


# -- Pose --------------------------------------------------------------------


@given(poses())
def test_as_matrix_is_rigid(p):
    T = p.as_matrix()
    R = T[:3, :3]
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9
    assert np.array_equal(T[3], [0, 0, 0, 1])


@given(poses(), poses())
def test_group_identities(p, q):
    ident = p.inverse().compose(p)
    np.testing.assert_allclose(ident.as_matrix(), np.eye(4), atol=1e-9)
    np.testing.assert_allclose(p.compose(p.inverse()).as_matrix(), np.eye(4), atol=1e-9)
    np.testing.assert_allclose(p.compose(q).compose(q.inverse()).as_matrix(), p.as_matrix(), atol=1e-9)


@given(poses(), poses())
def test_compose_matches_matrix_product(p, q):
    np.testing.assert_allclose((p @ q).as_matrix(), p.as_matrix() @ q.as_matrix(), atol=1e-12)


@given(poses())
def test_serialization_round_trips(p):
    for text in (p.to_text(), " ".join(map(repr, p.to_tuple())), p.to_kitti_row()):
        back = Pose.from_text(text)
        np.testing.assert_allclose(back.as_matrix(), p.as_matrix(), atol=1e-12)


def test_apply_matches_matrix(rng):
    p = random_pose(rng)
    pts = rng.normal(size=(20, 3))
    want = (p.as_matrix() @ np.c_[pts, np.ones(20)].T).T[:, :3]
    np.testing.assert_allclose(p.apply(pts), want, atol=1e-12)


def test_pose_arrays_are_read_only():
    p = Pose.identity()
    with pytest.raises(ValueError):
        p.translation[0] = 1.0


# -- Euler -------------------------------------------------------------------


@given(st.floats(-3.1, 3.1), st.floats(-1.5, 1.5), st.floats(-3.1, 3.1))
def test_euler_matches_scipy_intrinsic_zyx(roll, pitch, yaw):
    want = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()
    R = euler_zyx_to_matrix(roll, pitch, yaw)
    np.testing.assert_allclose(R, want, atol=1e-12)
    r, p, y, locked = matrix_to_euler_zyx(R)
    assert not locked
    np.testing.assert_allclose([r, p, y], [roll, pitch, yaw], atol=1e-9)


def test_gimbal_lock_flagged():
    R = euler_zyx_to_matrix(0.3, math.pi / 2, 0.1)
    *_, locked = matrix_to_euler_zyx(R)
    assert locked
    err = compute_metrics(Pose.from_rt(R, np.zeros(3)), Pose.identity())
    assert err.gimbal_lock


# -- noise protocol ----------------------------------------------------------


def test_zero_noise_is_identity(rng):
    p = sample_noise(NoiseSpec(0.0, 0.0), rng)
    np.testing.assert_array_equal(p.as_matrix(), np.eye(4))


def test_noise_bounds_and_mean():
    rng = np.random.default_rng(7)
    spec = NoiseSpec(1.5, 20.0)
    n = 10_000
    trans, ang = np.empty((n, 3)), np.empty((n, 3))
    for i in range(n):
        p = sample_noise(spec, rng)
        r, pt, y, _ = matrix_to_euler_zyx(p.R)
        trans[i], ang[i] = p.translation, np.rad2deg([r, pt, y])
    assert np.all(np.abs(trans) <= 1.5)
    assert np.all(np.abs(ang) <= 20.0 + 1e-9)
    # uniform on [-a, a]: sigma of the sample mean is a / sqrt(3 n)
    assert np.all(np.abs(trans.mean(0)) < 3 * 1.5 / math.sqrt(3 * n))
    assert np.all(np.abs(ang.mean(0)) < 3 * 20.0 / math.sqrt(3 * n))


def test_noise_deterministic():
    a = sample_noise(NoiseSpec(), np.random.default_rng(3))
    b = sample_noise(NoiseSpec(), np.random.default_rng(3))
    assert a.to_tuple() == b.to_tuple()


def test_noise_spec_validates():
    with pytest.raises(ValueError):
        NoiseSpec(-1.0, 5.0)


def test_make_initial_cases(rng):
    gt = random_pose(rng)
    np.testing.assert_allclose(make_initial(gt, Pose.identity()).as_matrix(), gt.as_matrix(), atol=1e-15)
    shifted = make_initial(Pose.identity(), Pose(translation=np.array([1.0, 0, 0])))
    np.testing.assert_array_equal(shifted.translation, [1, 0, 0])
    for _ in range(50):
        gt, d = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(make_initial(gt, d).as_matrix(), d.as_matrix() @ gt.as_matrix(), atol=1e-12)


def test_supervision_target_cases(rng):
    gt = random_pose(rng)
    np.testing.assert_allclose(supervision_target(gt, gt).as_matrix(), np.eye(4), atol=1e-12)
    for _ in range(50):
        gt, d = random_pose(rng), random_pose(rng)
        init = make_initial(gt, d)
        np.testing.assert_allclose(supervision_target(init, gt).as_matrix(), d.as_matrix(), atol=1e-9)
        other = random_pose(rng)
        want = other.as_matrix() @ np.linalg.inv(gt.as_matrix())
        np.testing.assert_allclose(supervision_target(other, gt).as_matrix(), want, atol=1e-12)


def test_recover_extrinsic_cases(rng):
    T = random_pose(rng)
    np.testing.assert_allclose(recover_extrinsic(Pose.identity(), T).as_matrix(), T.as_matrix(), atol=1e-15)
    for _ in range(50):
        gt, d = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(recover_extrinsic(d, make_initial(gt, d)).as_matrix(), gt.as_matrix(), atol=1e-9)
        a, b = random_pose(rng), random_pose(rng)
        want = np.linalg.inv(a.as_matrix()) @ b.as_matrix()
        np.testing.assert_allclose(recover_extrinsic(a, b).as_matrix(), want, atol=1e-12)


@given(poses(), poses())
def test_noise_cancellation_chain(gt, d):
    init = make_initial(gt, d)
    est = recover_extrinsic(supervision_target(init, gt), init)
    np.testing.assert_allclose(est.as_matrix(), gt.as_matrix(), atol=1e-9)


# -- metrics -----------------------------------------------------------------


@given(poses())
def test_metrics_zero_for_equal(p):
    err = compute_metrics(p, p)
    assert err.e_t == 0.0
    assert err.e_r < 1e-6


def test_metrics_pure_yaw(rng):
    gt = random_pose(rng)
    pred = Pose.from_rt(rot_z(math.radians(5)), np.zeros(3)).compose(Pose.from_rt(gt.R, gt.translation))
    pred = Pose(pred.rotation, gt.translation)
    err = compute_metrics(pred, gt)
    np.testing.assert_allclose(err.rot_rpy, [0, 0, 5], atol=1e-6)
    np.testing.assert_allclose(err.trans_xyz, 0, atol=1e-12)


def test_metrics_translation_cm(rng):
    gt = random_pose(rng)
    pred = Pose(gt.rotation, gt.translation + [0.02, 0, 0])
    err = compute_metrics(pred, gt)
    np.testing.assert_allclose(err.trans_xyz, [2, 0, 0], atol=1e-9)
    assert err.e_r < 1e-9


@given(poses(), poses())
def test_metric_norms(a, b):
    err = compute_metrics(a, b)
    assert isinstance(err, CalibrationError)
    assert err.e_t == pytest.approx(np.linalg.norm(err.trans_xyz))
    assert err.e_r == pytest.approx(np.linalg.norm(err.rot_rpy))
    assert set(err.row()) == {"X", "Y", "Z", "Roll", "Pitch", "Yaw", "E_t", "E_R"}
