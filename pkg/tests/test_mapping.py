import math

import numpy as np
import pytest

from locpipe.errors import (CheiralityViolation, DegenerateGeometry,
                            MissingTimestamps, NoValidObservation)
from locpipe.geometry import PinholeCamera, RigidPose, project
from locpipe.mapping import (observation_jacobian, pairs_by_covisibility,
                             pairs_by_global, pairs_by_pose, pairs_by_sequence,
                             point_information, refine_map, triangulate)
from locpipe.scene import MapPoint, RegisteredImage, SparseMap
from locpipe.synth import look_at_pose

CAM = PinholeCamera(500, 500, 320, 240, 640, 480)


def map_with_centers(centers, tracks=None, timestamps=None):
    images = {}
    observed = {i + 1: {} for i in range(len(centers))}
    points = {}
    if tracks:
        for pid, image_ids in tracks.items():
            tr = []
            for image_id in image_ids:
                kp = len(observed[image_id])
                observed[image_id][kp] = pid
                tr.append((image_id, kp))
            points[pid] = MapPoint(position=np.array([pid, 0, 5.0]), track=tr)
    for i, c in enumerate(centers):
        pose = RigidPose(np.array([1.0, 0, 0, 0]), -np.asarray(c, float))
        images[i + 1] = RegisteredImage(
            id=i + 1, name=f"im{i+1}", camera_id=1, pose=pose,
            observed_points=observed[i + 1],
            timestamp=None if timestamps is None else timestamps[i])
    return SparseMap({1: CAM}, images, points)


class TestPairsByPose:
    def test_two_images_within_radius(self):
        m = map_with_centers([[0, 0, 0], [1, 0, 0]])
        out = pairs_by_pose(m, k=1, radius=2.0)
        assert out.pairs == [(1, 2)]
        assert out.sources == ["POSE"]

    def test_zero_radius_empty(self):
        m = map_with_centers([[0, 0, 0], [0, 0, 0]])
        assert len(pairs_by_pose(m, k=3, radius=0.0)) == 0

    def test_line_of_cameras_matches_sorted_distance_oracle(self):
        centers = [[float(i), 0, 0] for i in range(10)]
        m = map_with_centers(centers)
        out = pairs_by_pose(m, k=2, radius=100.0)
        # oracle: each image paired with its 2 nearest by exhaustive sort
        expected = set()
        arr = np.array(centers)
        for i in range(10):
            d = np.linalg.norm(arr - arr[i], axis=1)
            d[i] = np.inf
            for j in np.argsort(d, kind="stable")[:2]:
                expected.add((min(i + 1, j + 1), max(i + 1, j + 1)))
        assert out.pair_set() == expected


class TestPairsByCovisibility:
    def test_disjoint_empty(self):
        m = map_with_centers([[0, 0, 0], [1, 0, 0]], tracks={1: [1], 2: [2]})
        assert len(pairs_by_covisibility(m, min_shared=1)) == 0

    def test_zero_threshold_all_pairs(self):
        m = map_with_centers([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        out = pairs_by_covisibility(m, min_shared=0)
        assert out.pair_set() == {(1, 2), (1, 3), (2, 3)}

    def test_intersection_count_oracle(self):
        rng = np.random.default_rng(0)
        tracks = {pid: sorted(rng.choice([1, 2, 3, 4], rng.integers(1, 4),
                                         replace=False))
                  for pid in range(1, 60)}
        m = map_with_centers([[i, 0, 0] for i in range(4)], tracks=tracks)
        out = pairs_by_covisibility(m, min_shared=5)
        expected = set()
        for i in range(1, 5):
            for j in range(i + 1, 5):
                shared = len(m.observed_point_ids(i) & m.observed_point_ids(j))
                if shared >= 5:
                    expected.add((i, j))
        assert out.pair_set() == expected


class TestPairsByGlobal:
    def test_self_excluded_and_oracle(self):
        rng = np.random.default_rng(1)
        vecs = {i: rng.normal(size=8) for i in range(1, 9)}
        vecs = {i: v / np.linalg.norm(v) for i, v in vecs.items()}
        out = pairs_by_global(vecs, m=2)
        assert all(i != j for i, j in out.pairs)
        expected = set()
        for i, v in vecs.items():
            sims = {j: float(v @ vecs[j]) for j in vecs if j != i}
            top = sorted(sims, key=lambda j: (-sims[j], j))[:2]
            for j in top:
                expected.add((min(i, j), max(i, j)))
        assert out.pair_set() == expected

    def test_m_at_least_size_complete_graph(self):
        rng = np.random.default_rng(2)
        vecs = {i: rng.normal(size=4) for i in range(1, 5)}
        out = pairs_by_global(vecs, m=10)
        assert out.pair_set() == {(i, j) for i in range(1, 5)
                                  for j in range(i + 1, 5)}


class TestPairsBySequence:
    def test_window_one(self):
        m = map_with_centers([[0, 0, 0]] * 3, timestamps=[10.0, 20.0, 30.0])
        out = pairs_by_sequence(m, window=1)
        assert out.pair_set() == {(1, 2), (2, 3)}
        assert set(out.sources) == {"TEMPORAL"}

    def test_window_covers_all(self):
        m = map_with_centers([[0, 0, 0]] * 4, timestamps=[4.0, 3.0, 2.0, 1.0])
        out = pairs_by_sequence(m, window=10)
        assert len(out) == 6

    def test_window_two_sliding_enumeration(self):
        stamps = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        m = map_with_centers([[0, 0, 0]] * 6, timestamps=stamps)
        out = pairs_by_sequence(m, window=2)
        order = np.argsort(stamps) + 1
        expected = set()
        for a in range(6):
            for b in range(a + 1, min(a + 3, 6)):
                i, j = order[a], order[b]
                expected.add((min(i, j), max(i, j)))
        assert len(expected) == 9
        assert out.pair_set() == expected

    def test_missing_timestamps(self):
        m = map_with_centers([[0, 0, 0]] * 2)
        with pytest.raises(MissingTimestamps):
            pairs_by_sequence(m, window=1)


class TestTriangulate:
    def test_two_orthogonal_views_exact(self):
        p = np.array([0.0, 0.0, 5.0])
        pose1 = look_at_pose([0, 0, 0], p)
        pose2 = look_at_pose([5, 0, 5], p)
        obs = [(CAM, pose1, project(CAM, pose1, p)),
               (CAM, pose2, project(CAM, pose2, p))]
        out, residuals = triangulate(obs)
        np.testing.assert_allclose(out, p, atol=1e-9)
        assert max(residuals) < 1e-9

    def test_identical_poses_degenerate(self):
        pose = look_at_pose([0, 0, 0], [0, 0, 5])
        obs = [(CAM, pose, [320, 240]), (CAM, pose, [330, 250])]
        with pytest.raises(DegenerateGeometry):
            triangulate(obs)

    def test_parallel_rays_degenerate(self):
        pose1 = RigidPose.identity()
        pose2 = RigidPose(np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 0]))
        # same pixel in both views of a pure x-translated camera: rays parallel
        obs = [(CAM, pose1, [320.0, 240.0]), (CAM, pose2, [320.0, 240.0])]
        with pytest.raises(DegenerateGeometry):
            triangulate(obs)

    def test_noisy_four_views_rms_below_one_px(self):
        rng = np.random.default_rng(3)
        p = np.array([1.0, -0.5, 6.0])
        poses = [look_at_pose(c, p) for c in
                 ([0, 0, 0], [4, 1, 0], [-3, 2, 1], [1, 5, 0])]
        obs = []
        for pose in poses:
            pix = project(CAM, pose, p) + rng.normal(scale=0.5, size=2)
            obs.append((CAM, pose, pix))
        out, residuals = triangulate(obs)
        rms = float(np.sqrt(np.mean(np.square(residuals))))
        assert rms < 1.0
        assert np.linalg.norm(out - p) < 0.05

    def test_cheirality_violation(self):
        p = np.array([0.0, 0.0, 5.0])
        pose1 = look_at_pose([0, 0, 0], p)
        pose2 = look_at_pose([1, 0, 0], p)
        obs = [(CAM, pose1, project(CAM, pose1, p)),
               (CAM, pose2, project(CAM, pose2, p))]
        # a third camera looking away sees the solution behind it
        pose3 = look_at_pose([0, 0, 10], [0, 0, 20])
        obs.append((CAM, pose3, np.array([320.0, 240.0])))
        with pytest.raises(CheiralityViolation):
            triangulate(obs)


class TestObservationJacobian:
    def test_canonical_configuration(self):
        cam = PinholeCamera(1, 1, 0.5, 0.5, 2, 2)
        jac = observation_jacobian(cam, RigidPose.identity(), [0, 0, 1])
        np.testing.assert_allclose(jac, [[1, 0, 0], [0, 1, 0]], atol=1e-15)

    def test_hand_evaluated_case(self):
        cam = PinholeCamera(100, 100, 320, 240, 640, 480)
        jac = observation_jacobian(cam, RigidPose.identity(), [1, 2, 4])
        np.testing.assert_allclose(jac, [[25, 0, -6.25], [0, 25, -12.5]],
                                   atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            q = rng.normal(size=4)
            pose = RigidPose(q / np.linalg.norm(q), rng.normal(size=3))
            cam = PinholeCamera(rng.uniform(100, 1000), rng.uniform(100, 1000),
                                320, 240, 640, 480)
            z = rng.uniform(0.1, 100)
            pc = np.array([rng.uniform(-0.8, 0.8) * z,
                           rng.uniform(-0.8, 0.8) * z, z])
            p_w = pose.inverse().apply(pc)
            jac = observation_jacobian(cam, pose, p_w)
            h = 1e-6 * max(1.0, float(np.linalg.norm(p_w)))
            fd = np.zeros((2, 3))
            for axis in range(3):
                delta = np.zeros(3)
                delta[axis] = h
                fd[:, axis] = (project(cam, pose, p_w + delta)
                               - project(cam, pose, p_w - delta)) / (2 * h)
            err = np.linalg.norm(fd - jac) / np.linalg.norm(jac)
            assert err < 1e-6

    def test_behind_camera(self):
        with pytest.raises(CheiralityViolation):
            observation_jacobian(CAM, RigidPose.identity(), [0, 0, -2])


def two_view_geometry(theta_deg, depth=5.0, focal=500.0):
    """Two cameras at `depth` from the origin, viewing rays separated by
    theta, both looking at the world origin."""
    cam = PinholeCamera(focal, focal, 320, 240, 640, 480)
    theta = math.radians(theta_deg)
    c1 = np.array([0.0, 0.0, -depth])
    c2 = np.array([depth * math.sin(theta), 0.0, -depth * math.cos(theta)])
    return cam, [look_at_pose(c1, [0, 0, 0]), look_at_pose(c2, [0, 0, 0])]


class TestPointInformation:
    def test_single_observation_rank_two(self):
        cam, poses = two_view_geometry(30)
        unc = point_information([0, 0, 0], [(cam, poses[0])])
        assert unc.degenerate
        assert math.isinf(unc.sigma_max)
        eig = np.linalg.eigvalsh(unc.information)
        assert eig[0] < 1e-10 * eig[2]
        assert eig[1] > 1e-6 * eig[2]

    def test_two_identical_observations_double_information(self):
        cam, poses = two_view_geometry(30)
        one = point_information([0, 0, 0], [(cam, poses[0])])
        two = point_information([0, 0, 0], [(cam, poses[0]), (cam, poses[0])])
        np.testing.assert_allclose(two.information, 2 * one.information,
                                   atol=1e-9)

    def test_sigma_shrinks_sqrt2_on_observed_axes(self):
        cam, poses = two_view_geometry(45)
        views = [(cam, poses[0]), (cam, poses[1])]
        one = point_information([0, 0, 0], views)
        two = point_information([0, 0, 0], views + views)
        np.testing.assert_allclose(two.sigma_axes,
                                   one.sigma_axes / math.sqrt(2), rtol=1e-9)

    def test_baseline_sweep_strictly_decreasing(self):
        sigmas = []
        for theta in (1, 5, 15, 45, 90):
            cam, poses = two_view_geometry(theta)
            unc = point_information([0, 0, 0], [(cam, poses[0]), (cam, poses[1])])
            assert not unc.degenerate
            sigmas.append(unc.sigma_max)
        assert all(a > b for a, b in zip(sigmas, sigmas[1:]))

    def test_information_psd_property(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            views = []
            p = rng.normal(size=3) * 2
            for _ in range(rng.integers(1, 6)):
                c = p + rng.normal(size=3) * 5
                if np.linalg.norm(c - p) < 0.5:
                    c = p + np.array([0, 0, 5.0])
                views.append((CAM, look_at_pose(c, p)))
            unc = point_information(p, views)
            eig = np.linalg.eigvalsh(unc.information)
            assert eig[0] >= -1e-9 * max(eig[2], 1e-300)

    def test_monotone_under_added_observations(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            p = rng.normal(size=3)
            views = []
            prev = np.zeros(3)
            for _ in range(5):
                c = p + rng.normal(size=3) * 4
                if np.linalg.norm(c - p) < 0.5:
                    c = p + np.array([3.0, 0, 0])
                views.append((CAM, look_at_pose(c, p)))
                eig = np.sort(np.linalg.eigvalsh(
                    point_information(p, views).information))
                assert np.all(eig >= prev - 1e-9 * max(eig[-1], 1.0))
                prev = eig

    def test_no_valid_observation(self):
        pose = look_at_pose([0, 0, 0], [0, 0, 5])
        with pytest.raises(NoValidObservation):
            point_information([0, 0, -5], [(CAM, pose)])

    def test_weights_scale_information(self):
        cam, poses = two_view_geometry(30)
        views = [(cam, poses[0]), (cam, poses[1])]
        base = point_information([0, 0, 0], views)
        weighted = point_information([0, 0, 0], views, weights=[2.0, 2.0])
        np.testing.assert_allclose(weighted.information, 2 * base.information,
                                   atol=1e-9)


def synthetic_conditioned_map(rng, n_good=30, n_narrow=8):
    """Forward-projected map with wide-baseline and narrow-baseline points."""
    cam = CAM
    good_centers = [np.array([math.cos(a) * 6, math.sin(a) * 6, -4.0])
                    for a in np.linspace(0, 2 * math.pi, 8, endpoint=False)]
    narrow_centers = [np.array([0.0, 0.0, -8.0]),
                      np.array([0.05, 0.0, -8.0])]  # ~0.36 deg baseline at 8
    images = {}
    points = {}
    observed = {}
    poses = {}
    for i, c in enumerate(good_centers + narrow_centers, start=1):
        poses[i] = look_at_pose(c, [0, 0, 0])
        observed[i] = {}
    labels = {}
    pid = 1
    for _ in range(n_good):
        p = rng.normal(size=3) * np.array([1.5, 1.5, 0.8])
        track = []
        for i in range(1, len(good_centers) + 1):
            try:
                project(cam, poses[i], p)
            except CheiralityViolation:
                continue
            kp = len(observed[i])
            observed[i][kp] = pid
            track.append((i, kp))
            if len(track) == 4:
                break
        points[pid] = MapPoint(position=p, track=track)
        labels[pid] = "good"
        pid += 1
    for _ in range(n_narrow):
        p = rng.normal(size=3) * np.array([1.5, 1.5, 0.8])
        track = []
        for i in (len(good_centers) + 1, len(good_centers) + 2):
            kp = len(observed[i])
            observed[i][kp] = pid
            track.append((i, kp))
        points[pid] = MapPoint(position=p, track=track)
        labels[pid] = "narrow"
        pid += 1
    for i, pose in poses.items():
        images[i] = RegisteredImage(id=i, name=f"im{i}", camera_id=1,
                                    pose=pose, observed_points=observed[i])
    return SparseMap({1: cam}, images, points), labels


class TestRefineMap:
    def test_infinite_threshold_keeps_well_conditioned(self):
        rng = np.random.default_rng(7)
        m, labels = synthetic_conditioned_map(rng)
        refined, report = refine_map(m, sigma_threshold=math.inf, min_track=2)
        assert set(refined.points) == set(m.points)
        assert report.rejected == 0

    def test_zero_threshold_removes_all(self):
        rng = np.random.default_rng(8)
        m, _ = synthetic_conditioned_map(rng)
        refined, report = refine_map(m, sigma_threshold=0.0, min_track=2)
        assert len(refined.points) == 0
        assert report.kept == 0

    def test_median_multiplier_separates_conditioning(self):
        rng = np.random.default_rng(9)
        m, labels = synthetic_conditioned_map(rng, n_good=40, n_narrow=10)
        refined, report = refine_map(m, sigma_mult=3.0, min_track=2)
        kept = set(refined.points)
        good = {p for p, l in labels.items() if l == "good"}
        narrow = {p for p, l in labels.items() if l == "narrow"}
        assert len(kept & good) / len(good) >= 0.95
        assert len(narrow - kept) / len(narrow) >= 0.95

    def test_min_track_rejects_short_tracks(self):
        rng = np.random.default_rng(10)
        m, _ = synthetic_conditioned_map(rng)
        refined, report = refine_map(m, sigma_threshold=math.inf, min_track=5)
        assert all(len(p.track) >= 5 for p in refined.points.values())

    def test_idempotent_at_fixed_threshold(self):
        rng = np.random.default_rng(11)
        m, _ = synthetic_conditioned_map(rng)
        once, _ = refine_map(m, sigma_threshold=0.02, min_track=2)
        twice, report = refine_map(once, sigma_threshold=0.02, min_track=2)
        assert set(once.points) == set(twice.points)
        assert report.rejected == 0

    def test_report_format(self):
        rng = np.random.default_rng(12)
        m, _ = synthetic_conditioned_map(rng, n_good=5, n_narrow=2)
        _, report = refine_map(m, sigma_mult=3.0)
        text = report.to_text()
        lines = text.strip().splitlines()
        assert len(lines) == len(m.points) + 1
        for line in lines[:-1]:
            pid, sigma, decision = line.split()
            assert decision in ("keep", "reject_sigma", "reject_degenerate",
                                "reject_track")
        assert lines[-1].startswith("# kept")

    def test_survivors_carry_uncertainty(self):
        rng = np.random.default_rng(13)
        m, _ = synthetic_conditioned_map(rng)
        refined, _ = refine_map(m, sigma_threshold=math.inf, min_track=2)
        for pt in refined.points.values():
            assert pt.uncertainty_sigma is not None
            assert pt.covariance is not None
            np.testing.assert_allclose(pt.covariance, pt.covariance.T, atol=1e-12)
