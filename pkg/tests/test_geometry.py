"""Pose algebra, projection and error-metric tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointalign.geometry import (
    BehindCameraError,
    Camera,
    CANONICAL_UP,
    InvalidRotationError,
    Pose,
    PoseDelta,
    apply_pose,
    delta_between,
    pixel_bearing,
    pose_from_translation,
    pose_is_correct,
    project,
    quat_canonical,
    quat_conjugate,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_matrix,
    rotation_error_deg,
    translation_vector,
    update_pose,
)
from jointalign.geometry import SymmetryTag as Sym


def reference_quat_matrix(q):
    # independent oracle: hand-evaluated standard quaternion-to-matrix formula
    w, x, y, z = np.asarray(q) / np.linalg.norm(q)
    return np.array([
        [w*w + x*x - y*y - z*z, 2*(x*y - w*z), 2*(x*z + w*y)],
        [2*(x*y + w*z), w*w - x*x + y*y - z*z, 2*(y*z - w*x)],
        [2*(x*z - w*y), 2*(y*z + w*x), w*w - x*x - y*y + z*z],
    ])


def random_unit_quat(rng):
    q = rng.normal(size=4)
    while abs(q[0]) < 1e-3:  # keep away from the w=0 sign-flip boundary
        q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_pose(rng):
    return Pose(d=rng.uniform(0.5, 5.0),
                phi=rng.uniform(-math.pi, math.pi - 1e-6),
                theta=rng.uniform(0.05, math.pi - 0.05),
                q=random_unit_quat(rng),
                s=rng.uniform(0.5, 2.0, size=3))


CAM = Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)


class TestQuatToMatrix:
    def test_identity(self):
        np.testing.assert_allclose(quat_to_matrix([1, 0, 0, 0]), np.eye(3))

    def test_z_180(self):
        np.testing.assert_allclose(quat_to_matrix([0, 0, 0, 1]),
                                   np.diag([-1.0, -1.0, 1.0]), atol=1e-12)

    def test_z_90(self):
        h = math.sqrt(0.5)
        R = quat_to_matrix([h, 0, 0, h])
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)
        np.testing.assert_allclose(R, reference_quat_matrix([h, 0, 0, h]), atol=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(InvalidRotationError):
            quat_to_matrix([0, 0, 0, 0])

    def test_orthonormal_1000_random(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            R = quat_to_matrix(random_unit_quat(rng))
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_matches_reference_formula(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            q = random_unit_quat(rng)
            np.testing.assert_allclose(quat_to_matrix(q), reference_quat_matrix(q),
                                       atol=1e-12)


class TestTranslationVector:
    def test_polar_axis(self):
        p = Pose(3.0, 0.0, 0.0, [1, 0, 0, 0], [1, 1, 1])
        np.testing.assert_allclose(translation_vector(p), [0, 0, 3], atol=1e-15)

    def test_x_axis(self):
        p = Pose(2.0, 0.0, math.pi / 2, [1, 0, 0, 0], [1, 1, 1])
        np.testing.assert_allclose(translation_vector(p), [2, 0, 0], atol=1e-12)

    def test_y_axis(self):
        p = Pose(1.0, math.pi / 2, math.pi / 2, [1, 0, 0, 0], [1, 1, 1])
        np.testing.assert_allclose(translation_vector(p), [0, 1, 0], atol=1e-12)

    def test_norm_is_d(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p = random_pose(rng)
            assert abs(np.linalg.norm(translation_vector(p)) - p.d) < 1e-12

    def test_round_trip_from_translation(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = random_pose(rng)
            p2 = pose_from_translation(translation_vector(p), p.q, p.s)
            np.testing.assert_allclose(translation_vector(p2), translation_vector(p),
                                       atol=1e-12)


class TestApplyPose:
    def test_identity_transform(self):
        p = Pose(1e-10, 0.0, 0.0, [1, 0, 0, 0], [1, 1, 1])  # T ~ 0 fixture
        pts = np.array([[0.3, -0.2, 0.5], [1, 1, 1]])
        np.testing.assert_allclose(apply_pose(p, pts), pts, atol=1e-9)

    def test_scale_then_translate(self):
        p = Pose(3.0, 0.0, 0.0, [1, 0, 0, 0], [2, 1, 1])  # T = (0,0,3)
        np.testing.assert_allclose(apply_pose(p, [[1, 1, 1]]), [[2, 1, 4]], atol=1e-12)

    def test_rotation_90_about_z(self):
        h = math.sqrt(0.5)
        p = Pose(1e-12, 0.0, 0.0, [h, 0, 0, h], [1, 1, 1])
        np.testing.assert_allclose(apply_pose(p, [[1, 0, 0]]), [[0, 1, 0]], atol=1e-9)

    def test_scale_applied_before_rotation(self):
        h = math.sqrt(0.5)
        p = Pose(1e-12, 0.0, 0.0, [h, 0, 0, h], [2, 1, 1])
        # canonical x stretched by 2, then rotated onto +y
        np.testing.assert_allclose(apply_pose(p, [[1, 0, 0]]), [[0, 2, 0]], atol=1e-9)


class TestUpdatePose:
    def test_identity_delta_fixpoint(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            p = random_pose(rng)
            p2 = update_pose(p, PoseDelta.identity())
            assert p2.d == p.d and p2.phi == p.phi and p2.theta == p.theta
            np.testing.assert_array_equal(p2.q, p.q)
            np.testing.assert_array_equal(p2.s, p.s)

    def test_multiplicative_distance(self):
        p = Pose(2.0, 0.0, 0.0, [1, 0, 0, 0], [1, 1, 1])
        d = PoseDelta(1.5, 0.0, 0.0, [1, 0, 0, 0], [1, 1, 1])
        p2 = update_pose(p, d)
        assert p2.d == pytest.approx(3.0)
        np.testing.assert_allclose(translation_vector(p2), [0, 0, 3], atol=1e-12)

    def test_componentwise_scale(self):
        p = Pose(1.0, 0.0, 0.0, [1, 0, 0, 0], [1, 2, 1])
        d = PoseDelta(1.0, 0.0, 0.0, [1, 0, 0, 0], [2, 0.5, 1])
        np.testing.assert_allclose(update_pose(p, d).s, [2, 1, 1])

    def test_theta_overflow_canonicalized(self):
        p = Pose(1.0, 0.0, 3.0, [1, 0, 0, 0], [1, 1, 1])
        d = PoseDelta(1.0, 0.0, 0.5, [1, 0, 0, 0], [1, 1, 1])
        p2 = update_pose(p, d)  # raw theta 3.5 > pi folds back
        assert 0.0 <= p2.theta <= math.pi
        assert -math.pi <= p2.phi < math.pi

    def test_inverse_delta_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            p = random_pose(rng)
            delta = PoseDelta(
                dd=rng.uniform(0.5, 2.0),
                dphi=rng.uniform(-0.7, 0.7),
                dtheta=float(np.clip(rng.uniform(-0.7, 0.7),
                                     0.01 - p.theta, math.pi - 0.01 - p.theta)),
                dq=random_unit_quat(rng),
                ds=rng.uniform(0.5, 2.0, size=3))
            p2 = update_pose(update_pose(p, delta), delta.inverse())
            assert abs(p2.d - p.d) < 1e-9
            assert abs(p2.phi - p.phi) < 1e-9
            assert abs(p2.theta - p.theta) < 1e-9
            assert np.all(np.abs(p2.q - p.q) < 1e-9)
            assert np.all(np.abs(p2.s - p.s) < 1e-9)

    def test_delta_between_is_exact(self):
        rng = np.random.default_rng(6)
        for _ in range(300):
            a, b = random_pose(rng), random_pose(rng)
            c = update_pose(a, delta_between(a, b))
            assert abs(c.d - b.d) < 1e-9
            assert np.linalg.norm(translation_vector(c) - translation_vector(b)) < 1e-9
            assert rotation_error_deg(c.q, b.q) < 1e-7
            assert np.all(np.abs(c.s - b.s) < 1e-9)


class TestProjection:
    def test_principal_axis(self):
        u, v, depth = project(CAM, [0, 0, 2])
        assert (u, v, depth) == (50, 50, 2)

    def test_pinhole_formula(self):
        u, v, depth = project(CAM, [1, 0, 2])
        assert (u, v, depth) == (100, 50, 2)

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project(CAM, [0, 0, -1])

    def test_bearing_at_principal_point(self):
        np.testing.assert_allclose(pixel_bearing(CAM, 50, 50), [0, 0, 1])

    def test_bearing_off_axis(self):
        b = pixel_bearing(CAM, 150, 50)
        np.testing.assert_allclose(b, [math.sqrt(0.5), 0, math.sqrt(0.5)], atol=1e-12)
        assert abs(np.linalg.norm(b) - 1.0) < 1e-12

    def test_project_bearing_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            pt = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8),
                           rng.uniform(0.5, 6.0)])
            pt[:2] *= pt[2]  # keep the pixel inside the image
            u, v, _ = project(CAM, pt)
            b = pixel_bearing(CAM, u, v)
            assert np.linalg.norm(np.cross(b, pt / np.linalg.norm(pt))) < 1e-9


def vertical_quat(deg):
    return quat_from_axis_angle(CANONICAL_UP, math.radians(deg))


class TestRotationError:
    def test_zero_for_equal(self):
        rng = np.random.default_rng(8)
        for sym in Sym:
            q = random_unit_quat(rng)
            assert rotation_error_deg(q, q, sym) < 1e-9

    def test_four_fold_absorbs_90(self):
        assert rotation_error_deg(vertical_quat(90), [1, 0, 0, 0], Sym.FOUR_FOLD) < 1e-9

    def test_two_fold_sees_90(self):
        err = rotation_error_deg(vertical_quat(90), [1, 0, 0, 0], Sym.TWO_FOLD)
        assert err == pytest.approx(90.0, abs=1e-9)

    def test_two_fold_absorbs_180(self):
        assert rotation_error_deg(vertical_quat(180), [1, 0, 0, 0], Sym.TWO_FOLD) < 1e-9

    def test_infinite_ignores_azimuth(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            q = random_unit_quat(rng)
            q2 = quat_multiply(q, vertical_quat(rng.uniform(0, 360)))
            assert rotation_error_deg(q2, q, Sym.INFINITE) < 1e-7

    def test_infinite_sees_tilt(self):
        tilt = quat_from_axis_angle([1, 0, 0], math.radians(30))
        err = rotation_error_deg(tilt, [1, 0, 0, 0], Sym.INFINITE)
        assert err == pytest.approx(30.0, abs=1e-6)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(10)
        for sym in Sym:
            for _ in range(50):
                qa, qb = random_unit_quat(rng), random_unit_quat(rng)
                assert rotation_error_deg(qa, qb, sym) == pytest.approx(
                    rotation_error_deg(qb, qa, sym), abs=1e-8)

    def test_zero_iff_symmetry_equivalent(self):
        rng = np.random.default_rng(11)
        q = random_unit_quat(rng)
        near = quat_multiply(q, quat_from_axis_angle([0, 1, 0], 0.01))
        assert rotation_error_deg(near, q, Sym.FOUR_FOLD) > 0.1
        for deg in (90, 180, 270):
            assert rotation_error_deg(quat_multiply(q, vertical_quat(deg)), q,
                                      Sym.FOUR_FOLD) < 1e-7


class TestPoseIsCorrect:
    def make(self, **kw):
        base = dict(d=2.0, phi=0.3, theta=0.8, q=[1, 0, 0, 0], s=[1, 1, 1])
        base.update(kw)
        return Pose(**base)

    def test_exact_match(self):
        p = self.make()
        assert pose_is_correct(p, p, Sym.NONE)

    def test_boundary_interior(self):
        gt = self.make()
        t = translation_vector(gt) + np.array([0.19, 0, 0])
        pred = pose_from_translation(t, quat_from_axis_angle([0, 1, 0], math.radians(19)),
                                     gt.s * 1.19)
        assert pose_is_correct(pred, gt, Sym.NONE)

    def test_single_violation(self):
        gt = self.make()
        t = translation_vector(gt) + np.array([0.21, 0, 0])
        pred = pose_from_translation(t, gt.q, gt.s)
        assert not pose_is_correct(pred, gt, Sym.NONE)

    def test_invariant_under_symmetry_group(self):
        rng = np.random.default_rng(12)
        gt = self.make(q=random_unit_quat(rng))
        for deg in (90, 180, 270):
            pred = self.make(q=quat_multiply(gt.q, vertical_quat(deg)))
            assert pose_is_correct(pred, gt, Sym.FOUR_FOLD)
        pred = self.make(q=quat_multiply(gt.q, vertical_quat(90)))
        assert not pose_is_correct(pred, gt, Sym.NONE)


class TestInvariantsHypothesis:
    @given(st.floats(0.3, 5.0), st.floats(-3.1, 3.1), st.floats(0.05, 3.09),
           st.integers(0, 2**31))
    @settings(max_examples=200, deadline=None)
    def test_pose_construction_canonical(self, d, phi, theta, qseed):
        q = random_unit_quat(np.random.default_rng(qseed))
        p = Pose(d, phi, theta, q, [1, 1, 1])
        assert -math.pi <= p.phi < math.pi
        assert 0.0 <= p.theta <= math.pi
        assert abs(np.linalg.norm(p.q) - 1.0) < 1e-9
        assert p.q[0] >= 0

    @given(st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_quat_canonical_idempotent(self, seed):
        q = random_unit_quat(np.random.default_rng(seed))
        c = quat_canonical(q)
        np.testing.assert_array_equal(quat_canonical(c), c)
        assert rotation_error_deg(c, q) < 1e-9

    @given(st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_conjugate_inverts(self, seed):
        q = random_unit_quat(np.random.default_rng(seed))
        ident = quat_multiply(q, quat_conjugate(q))
        np.testing.assert_allclose(ident, [1, 0, 0, 0], atol=1e-12)
