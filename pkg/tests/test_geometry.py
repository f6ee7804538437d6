import numpy as np
import pytest

from locpipe.errors import CheiralityViolation
from locpipe.geometry import (PinholeCamera, RigidPose, compose, distort_normalized,
                              matrix_to_quat, project, project_many, quat_to_matrix,
                              unproject)


def random_pose(rng):
    q = rng.normal(size=4)
    return RigidPose(q / np.linalg.norm(q), rng.normal(size=3))


class TestRigidPose:
    def test_identity_compose_identity(self):
        ident = RigidPose.identity()
        out = compose(ident, ident)
        np.testing.assert_allclose(out.quat, ident.quat, atol=1e-15)
        np.testing.assert_allclose(out.t, ident.t, atol=1e-15)

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pose = random_pose(rng)
            out = compose(pose, pose.inverse())
            np.testing.assert_allclose(abs(out.quat[0]), 1.0, atol=1e-12)
            np.testing.assert_allclose(out.t, 0.0, atol=1e-12)

    def test_two_quarter_turns_match_matrix_oracle(self):
        quarter = RigidPose.from_axis_angle([0, 0, 1], np.pi / 2)
        out = compose(quarter, quarter)
        # oracle: multiply the rotation matrices directly
        r = quarter.rotation_matrix @ quarter.rotation_matrix
        np.testing.assert_allclose(out.rotation_matrix, r, atol=1e-12)
        half = RigidPose.from_axis_angle([0, 0, 1], np.pi)
        np.testing.assert_allclose(out.rotation_matrix, half.rotation_matrix,
                                   atol=1e-12)

    def test_compose_matches_matrix_action_on_points(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = random_pose(rng), random_pose(rng)
            p = rng.normal(size=3)
            np.testing.assert_allclose(compose(a, b).apply(p), a.apply(b.apply(p)),
                                       atol=1e-12)

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            q2 = matrix_to_quat(quat_to_matrix(q))
            if np.dot(q, q2) < 0:
                q2 = -q2
            np.testing.assert_allclose(q2, q, atol=1e-12)

    def test_quaternion_normalized_on_construction(self):
        pose = RigidPose(np.array([2.0, 0.0, 0.0, 0.0]), np.zeros(3))
        assert abs(np.linalg.norm(pose.quat) - 1.0) < 1e-12

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            RigidPose(np.zeros(4), np.zeros(3))

    def test_center(self):
        rng = np.random.default_rng(3)
        pose = random_pose(rng)
        np.testing.assert_allclose(pose.apply(pose.center), 0.0, atol=1e-12)


class TestPinholeCamera:
    def test_validation(self):
        with pytest.raises(ValueError):
            PinholeCamera(0, 100, 320, 240, 640, 480)
        with pytest.raises(ValueError):
            PinholeCamera(100, 100, 700, 240, 640, 480)
        with pytest.raises(ValueError):
            PinholeCamera(100, 100, 320, 240, 640, 480,
                          distortion=[np.nan, 0, 0, 0])


class TestProject:
    def test_optical_axis(self):
        cam = PinholeCamera(1, 1, 0.5, 0.5, 2, 2)
        pix = project(cam, RigidPose.identity(), [0, 0, 1])
        np.testing.assert_allclose(pix, [0.5, 0.5], atol=1e-15)

    def test_hand_evaluated_pinhole(self):
        # u = 100 * 1/4 + 320, v = 100 * 2/4 + 240
        cam = PinholeCamera(100, 100, 320, 240, 640, 480)
        pix = project(cam, RigidPose.identity(), [1, 2, 4])
        np.testing.assert_allclose(pix, [345.0, 290.0], atol=1e-12)

    def test_behind_camera_raises(self):
        cam = PinholeCamera(100, 100, 320, 240, 640, 480)
        with pytest.raises(CheiralityViolation):
            project(cam, RigidPose.identity(), [0, 0, -1])

    def test_project_unproject_round_trip(self):
        rng = np.random.default_rng(4)
        cam = PinholeCamera(500, 480, 320, 240, 640, 480)
        for _ in range(100):
            pose = random_pose(rng)
            depth = rng.uniform(0.5, 20)
            pix = rng.uniform([0, 0], [639, 479])
            p_w = unproject(cam, pose, pix, depth)
            np.testing.assert_allclose(project(cam, pose, p_w), pix, atol=1e-9)

    def test_project_many_matches_scalar(self):
        rng = np.random.default_rng(5)
        cam = PinholeCamera(500, 480, 320, 240, 640, 480,
                            distortion=[-0.1, 0.02, 1e-3, -5e-4])
        pose = random_pose(rng)
        pts = pose.inverse().apply(
            np.column_stack([rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 20),
                             rng.uniform(1, 5, 20)]))
        pix, ok = project_many(cam, pose, pts)
        assert ok.all()
        for i in range(len(pts)):
            np.testing.assert_allclose(pix[i], project(cam, pose, pts[i]),
                                       atol=1e-12)

    def test_distortion_at_principal_point_is_fixed_point(self):
        cam = PinholeCamera(500, 500, 320, 240, 640, 480,
                            distortion=[-0.2, 0.05, 0, 0])
        np.testing.assert_allclose(distort_normalized(cam, [0.0, 0.0])[0],
                                   [0.0, 0.0], atol=1e-15)
