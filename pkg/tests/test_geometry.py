"""Tests for rigid transforms, Rodrigues vectors and the projection model."""

from __future__ import annotations

import math

import numpy as np
import pytest

from markercal.errors import PointBehindCamera
from markercal.geometry import (
    CameraIntrinsics,
    MarkerTemplate,
    RigidTransform,
    TwistParams,
    compose,
    from_twist,
    invert,
    project,
    project_marker_corner,
    project_points_jacobian,
    rotation_angle,
    rotation_from_rvec,
    rotation_jacobian_factor,
    rotation_to_quaternion,
    rvec_from_rotation,
    to_twist,
    undistort_to_normalized,
)

# ---------------------------------------------------------------------------
# Independent oracles. Written against the textbook formulas, not the package
# implementation, so agreement is evidence and not tautology.
# ---------------------------------------------------------------------------


def _quat_exp_rotation(rvec) -> np.ndarray:
    """Rotation matrix via the quaternion exponential q = (cos t/2, sin t/2 * n)."""
    v = np.asarray(rvec, dtype=float)
    theta = float(np.linalg.norm(v))
    if theta < 1e-14:
        w, x, y, z = 1.0, 0.0, 0.0, 0.0
    else:
        n = v / theta
        w = math.cos(theta / 2.0)
        x, y, z = math.sin(theta / 2.0) * n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _pinhole_oracle(point, fx, fy, cx, cy, dist):
    """Scalar Brown-Conrady projection, coded independently."""
    px, py, pz = point
    a, b = px / pz, py / pz
    k1, k2, p1, p2, k3 = dist
    r2 = a * a + b * b
    rad = 1.0 + k1 * r2 + k2 * r2 ** 2 + k3 * r2 ** 3
    xd = a * rad + 2 * p1 * a * b + p2 * (r2 + 2 * a * a)
    yd = b * rad + p1 * (r2 + 2 * b * b) + 2 * p2 * a * b
    return np.array([fx * xd + cx, fy * yd + cy])


def _random_transform(rng) -> RigidTransform:
    rvec = rng.uniform(-1, 1, 3)
    rvec *= rng.uniform(0, math.pi - 1e-3) / np.linalg.norm(rvec)
    return RigidTransform(rotation_from_rvec(rvec), rng.uniform(-2, 2, 3))


def _rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _skew(p):
    return np.array(
        [[0.0, -p[2], p[1]], [p[2], 0.0, -p[0]], [-p[1], p[0], 0.0]]
    )


DEFAULT_INTR = CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0)


class TestRigidTransform:
    def test_identity(self):
        t = RigidTransform.identity()
        np.testing.assert_array_equal(t.rotation, np.eye(3))
        np.testing.assert_array_equal(t.translation, np.zeros(3))

    def test_invariants_on_random_transforms(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            t = _random_transform(rng)
            np.testing.assert_allclose(t.rotation.T @ t.rotation, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9
            back = compose(t, invert(t))
            np.testing.assert_allclose(back.as_matrix(), np.eye(4), atol=1e-9)

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(11)
        t = _random_transform(rng)
        np.testing.assert_allclose(
            RigidTransform.from_matrix(t.as_matrix()).as_matrix(), t.as_matrix()
        )

    def test_apply_batch_matches_single(self):
        rng = np.random.default_rng(3)
        t = _random_transform(rng)
        pts = rng.uniform(-1, 1, (10, 3))
        batch = t.apply(pts)
        for i in range(10):
            np.testing.assert_allclose(batch[i], t.apply(pts[i]))


class TestCompose:
    def test_identity_neutral(self):
        rng = np.random.default_rng(5)
        t = _random_transform(rng)
        for combined in (compose(RigidTransform.identity(), t), compose(t, RigidTransform.identity())):
            np.testing.assert_allclose(combined.as_matrix(), t.as_matrix(), atol=1e-15)

    def test_rotation_group(self):
        quarter = RigidTransform(_rot_z(90.0), np.zeros(3))
        half = compose(quarter, quarter)
        np.testing.assert_allclose(half.rotation, _rot_z(180.0), atol=1e-12)

    def test_associative(self):
        rng = np.random.default_rng(13)
        a, b, c = (_random_transform(rng) for _ in range(3))
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        np.testing.assert_allclose(left.as_matrix(), right.as_matrix(), atol=1e-9)

    def test_applies_right_operand_first(self):
        rng = np.random.default_rng(17)
        a, b = _random_transform(rng), _random_transform(rng)
        p = rng.uniform(-1, 1, 3)
        np.testing.assert_allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12)


class TestInvert:
    def test_identity(self):
        t = invert(RigidTransform.identity())
        np.testing.assert_array_equal(t.as_matrix(), np.eye(4))

    def test_pure_translation(self):
        t = invert(RigidTransform(np.eye(3), [1.0, 2.0, 3.0]))
        np.testing.assert_allclose(t.translation, [-1.0, -2.0, -3.0])
        np.testing.assert_array_equal(t.rotation, np.eye(3))

    def test_involution(self):
        rng = np.random.default_rng(19)
        t = _random_transform(rng)
        np.testing.assert_allclose(invert(invert(t)).as_matrix(), t.as_matrix(), atol=1e-12)


class TestTwist:
    def test_zero_twist_is_identity(self):
        t = from_twist(TwistParams(np.zeros(3), np.zeros(3)))
        np.testing.assert_allclose(t.as_matrix(), np.eye(4), atol=1e-15)

    def test_half_turn_about_x(self):
        t = from_twist(TwistParams([math.pi, 0.0, 0.0], np.zeros(3)))
        np.testing.assert_allclose(t.rotation, np.diag([1.0, -1.0, -1.0]), atol=1e-12)

    def test_round_trip_1000_random_twists(self):
        # oracle: the quaternion exponential, coded independently above
        rng = np.random.default_rng(23)
        for _ in range(1000):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            rvec = axis * rng.uniform(1e-8, math.pi - 1e-6)
            tvec = rng.uniform(-5, 5, 3)
            p = TwistParams(rvec, tvec)
            t = from_twist(p)
            np.testing.assert_allclose(t.rotation, _quat_exp_rotation(rvec), atol=1e-12)
            back = to_twist(t)
            np.testing.assert_allclose(back.rvec, rvec, atol=1e-9)
            np.testing.assert_allclose(back.tvec, tvec, atol=1e-12)

    def test_round_trip_preserves_rotation_action(self):
        rng = np.random.default_rng(29)
        t = _random_transform(rng)
        again = from_twist(to_twist(t))
        vecs = rng.normal(size=(100, 3))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        np.testing.assert_allclose(vecs @ again.rotation.T, vecs @ t.rotation.T, atol=1e-9)

    def test_angle_pi_sign_canonicalization(self):
        # first nonzero rvec component comes out positive at a half turn
        for axis in ([1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [-0.6, 0.8, 0.0]):
            r = _quat_exp_rotation(np.asarray(axis) * math.pi)
            rvec = rvec_from_rotation(r)
            assert abs(np.linalg.norm(rvec) - math.pi) < 1e-9
            nz = rvec[np.abs(rvec) > 1e-12]
            assert nz[0] > 0
            np.testing.assert_allclose(rotation_from_rvec(rvec), r, atol=1e-9)

    def test_tiny_angles(self):
        for scale in (1e-12, 1e-9, 1e-6):
            rvec = np.array([0.3, -0.4, 0.5]) * scale
            r = rotation_from_rvec(rvec)
            np.testing.assert_allclose(r, _quat_exp_rotation(rvec), atol=1e-15)
            np.testing.assert_allclose(rvec_from_rotation(r), rvec, atol=1e-15)


class TestQuaternion:
    def test_known_rotations(self):
        np.testing.assert_allclose(
            rotation_to_quaternion(np.eye(3)), [1.0, 0.0, 0.0, 0.0], atol=1e-12
        )
        half_x = rotation_from_rvec([math.pi / 2, 0.0, 0.0])
        s = math.sqrt(0.5)
        np.testing.assert_allclose(rotation_to_quaternion(half_x), [s, s, 0.0, 0.0], atol=1e-12)

    def test_scalar_part_nonnegative(self):
        rng = np.random.default_rng(31)
        for _ in range(200):
            q = rotation_to_quaternion(_random_transform(rng).rotation)
            assert q[0] >= 0.0
            assert abs(np.linalg.norm(q) - 1.0) < 1e-12

    def test_rotation_angle(self):
        assert rotation_angle(np.eye(3)) == 0.0
        assert abs(rotation_angle(_rot_z(90.0)) - math.pi / 2) < 1e-12
        assert abs(rotation_angle(np.diag([1.0, -1.0, -1.0])) - math.pi) < 1e-12


class TestIntrinsics:
    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1.0, fy=600.0, cx=320.0, cy=240.0)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=0)

    def test_pre_undistorted_forces_zero_dist(self):
        intr = CameraIntrinsics(
            fx=600.0, fy=600.0, cx=320.0, cy=240.0,
            dist=[-0.1, 0.01, 0.001, -0.001, 0.0], pre_undistorted=True,
        )
        np.testing.assert_array_equal(intr.dist, np.zeros(5))
        assert not intr.has_distortion


class TestMarkerTemplate:
    def test_corner_layout(self):
        tpl = MarkerTemplate(side=0.04)
        expected = np.array(
            [[0.02, -0.02, 0.0], [0.02, 0.02, 0.0], [-0.02, 0.02, 0.0], [-0.02, -0.02, 0.0]]
        )
        np.testing.assert_array_equal(tpl.corners, expected)
        np.testing.assert_array_equal(tpl.corners[:, 2], np.zeros(4))
        np.testing.assert_allclose(tpl.corners.mean(axis=0), np.zeros(3), atol=1e-18)

    def test_rejects_nonpositive_side(self):
        with pytest.raises(ValueError):
            MarkerTemplate(side=0.0)


class TestProject:
    def test_principal_point(self):
        np.testing.assert_allclose(project([0.0, 0.0, 1.0], DEFAULT_INTR), [320.0, 240.0])

    def test_unit_offset(self):
        np.testing.assert_allclose(project([0.1, 0.0, 1.0], DEFAULT_INTR), [380.0, 240.0])

    def test_distortion_matches_independent_oracle(self):
        intr = CameraIntrinsics(
            fx=610.0, fy=605.0, cx=320.0, cy=240.0, dist=[-0.1, 0.0, 0.0, 0.0, 0.0]
        )
        point = [0.1, 0.05, 0.8]
        got = project(point, intr)
        oracle = _pinhole_oracle(point, 610.0, 605.0, 320.0, 240.0, intr.dist)
        np.testing.assert_allclose(got, oracle, rtol=0, atol=1e-12)
        # frozen oracle output, exact in binary64
        np.testing.assert_array_equal(got, [396.10107421875, 277.7386474609375])

    def test_full_distortion_vector_matches_oracle(self):
        rng = np.random.default_rng(37)
        intr = CameraIntrinsics(
            fx=640.0, fy=635.0, cx=310.0, cy=250.0,
            dist=[-0.21, 0.07, 0.0013, -0.0008, 0.02],
        )
        for _ in range(50):
            p = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.5, 3.0)])
            np.testing.assert_allclose(
                project(p, intr),
                _pinhole_oracle(p, intr.fx, intr.fy, intr.cx, intr.cy, intr.dist),
                atol=1e-10,
            )

    def test_behind_camera_raises(self):
        for z in (0.0, -1.0, 1e-10):
            with pytest.raises(PointBehindCamera):
                project([0.0, 0.0, z], DEFAULT_INTR)
        with pytest.raises(PointBehindCamera):
            project([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]], DEFAULT_INTR)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(41)
        pts = np.column_stack(
            [rng.uniform(-0.5, 0.5, 8), rng.uniform(-0.5, 0.5, 8), rng.uniform(0.5, 2.0, 8)]
        )
        batch = project(pts, DEFAULT_INTR)
        for i in range(8):
            np.testing.assert_allclose(batch[i], project(pts[i], DEFAULT_INTR))


class TestUndistort:
    def test_round_trip(self):
        rng = np.random.default_rng(43)
        intr = CameraIntrinsics(
            fx=600.0, fy=600.0, cx=320.0, cy=240.0,
            dist=[-0.2, 0.05, 0.001, -0.002, 0.01],
        )
        pts = np.column_stack(
            [rng.uniform(-0.3, 0.3, 20), rng.uniform(-0.3, 0.3, 20), np.ones(20)]
        )
        pix = project(pts, intr)
        normalized = undistort_to_normalized(pix, intr)
        np.testing.assert_allclose(normalized, pts[:, :2], atol=1e-10)

    def test_no_distortion_is_linear(self):
        normalized = undistort_to_normalized([[380.0, 240.0]], DEFAULT_INTR)
        np.testing.assert_allclose(normalized, [[0.1, 0.0]], atol=1e-15)


class TestProjectJacobian:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(47)
        intr = CameraIntrinsics(
            fx=610.0, fy=605.0, cx=320.0, cy=240.0,
            dist=[-0.15, 0.04, 0.001, -0.001, 0.005],
        )
        pts = np.column_stack(
            [rng.uniform(-0.4, 0.4, 10), rng.uniform(-0.4, 0.4, 10), rng.uniform(0.5, 2.5, 10)]
        )
        pix, jac = project_points_jacobian(pts, intr)
        np.testing.assert_allclose(pix, project(pts, intr))
        h = 1e-6
        for i in range(len(pts)):
            fd = np.empty((2, 3))
            for axis in range(3):
                d = np.zeros(3)
                d[axis] = h
                fd[:, axis] = (project(pts[i] + d, intr) - project(pts[i] - d, intr)) / (2 * h)
            np.testing.assert_allclose(jac[i], fd, rtol=1e-4, atol=1e-6)


class TestRotationJacobianFactor:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(53)
        # spans the series branch (tiny angles) and the closed form up to near pi
        magnitudes = [1e-8, 1e-5, 5e-4, 2e-3, 0.3, 1.5, math.pi - 1e-3]
        for mag in magnitudes:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            rvec = axis * mag
            p = rng.uniform(-1, 1, 3)
            rot = rotation_from_rvec(rvec)
            analytic = -rot @ _skew(p) @ rotation_jacobian_factor(rvec, rot)
            h = 1e-7
            fd = np.empty((3, 3))
            for axis_i in range(3):
                d = np.zeros(3)
                d[axis_i] = h
                fd[:, axis_i] = (
                    rotation_from_rvec(rvec + d) @ p - rotation_from_rvec(rvec - d) @ p
                ) / (2 * h)
            np.testing.assert_allclose(analytic, fd, rtol=2e-4, atol=1e-6)


class TestProjectMarkerCorner:
    def test_marker_one_meter_ahead(self):
        tpl = MarkerTemplate(side=0.04)
        cam_from_obj = RigidTransform(np.eye(3), [0.0, 0.0, 1.0])
        got = project_marker_corner(
            cam_from_obj, RigidTransform.identity(), tpl, 1, DEFAULT_INTR
        )
        np.testing.assert_allclose(
            got, [600.0 * 0.02 + 320.0, 600.0 * -0.02 + 240.0]
        )

    def test_behind_camera_propagates(self):
        tpl = MarkerTemplate(side=0.04)
        cam_from_obj = RigidTransform(np.eye(3), [0.0, 0.0, -1.0])
        with pytest.raises(PointBehindCamera):
            project_marker_corner(cam_from_obj, RigidTransform.identity(), tpl, 1, DEFAULT_INTR)

    def test_corner_index_bounds(self):
        tpl = MarkerTemplate(side=0.04)
        t = RigidTransform(np.eye(3), [0.0, 0.0, 1.0])
        for bad in (0, 5):
            with pytest.raises(ValueError):
                project_marker_corner(t, RigidTransform.identity(), tpl, bad, DEFAULT_INTR)

    def test_matches_manual_chain(self):
        rng = np.random.default_rng(59)
        tpl = MarkerTemplate(side=0.05)
        cam_from_obj = RigidTransform(rotation_from_rvec([0.1, -0.2, 0.05]), [0.02, -0.01, 0.9])
        marker_from_ref = RigidTransform(rotation_from_rvec([0.0, 0.3, 0.0]), [0.05, 0.0, 0.01])
        for l in range(1, 5):
            manual = project(
                cam_from_obj.apply(marker_from_ref.apply(tpl.corners[l - 1])), DEFAULT_INTR
            )
            got = project_marker_corner(cam_from_obj, marker_from_ref, tpl, l, DEFAULT_INTR)
            np.testing.assert_allclose(got, manual, atol=1e-12)
