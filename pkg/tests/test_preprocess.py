import numpy as np
import pytest

from locpipe.errors import DimensionMismatch, ImageTooSmall, NoConvergence
from locpipe.features import LocalFeatureSet
from locpipe.geometry import PinholeCamera, distort_normalized
from locpipe.preprocess import MaskImage, apply_mask, plan_resize, undistort_keypoints


def feature_set(xy, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    xy = np.asarray(xy, dtype=float)
    kps = np.column_stack([xy, np.ones(len(xy)), np.zeros(len(xy))])
    return LocalFeatureSet(keypoints=kps, descriptors=rng.normal(size=(len(xy), dim)))


class TestPlanResize:
    def test_4032x3024(self):
        plan = plan_resize(4032, 3024)
        assert plan.scale == 1600 / 4032
        assert (plan.width, plan.height) == (1600, 1200)
        assert (plan.crop_right, plan.crop_bottom) == (0, 0)

    def test_1920x1080(self):
        plan = plan_resize(1920, 1080)
        assert (plan.width, plan.height) == (1600, 896)
        assert plan.scaled_size == (1600, 900)
        assert (plan.crop_right, plan.crop_bottom) == (0, 4)

    def test_1600_square_is_fixed_point(self):
        plan = plan_resize(1600, 1600)
        assert (plan.width, plan.height) == (1600, 1600)
        assert plan.scale == 1.0
        assert (plan.crop_right, plan.crop_bottom) == (0, 0)

    def test_small_images_not_upscaled(self):
        plan = plan_resize(800, 601)
        assert plan.scale == 1.0
        assert (plan.width, plan.height) == (800, 600)

    def test_portrait(self):
        plan = plan_resize(1080, 1920)
        assert (plan.width, plan.height) == (896, 1600)

    def test_invariants_over_random_sizes(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            w = int(rng.integers(8, 5000))
            h = int(rng.integers(8, 5000))
            try:
                plan = plan_resize(w, h)
            except ImageTooSmall:
                assert min(w, h) * (1600 / max(w, h)) < 8
                continue
            assert plan.width % 8 == 0 and plan.height % 8 == 0
            assert plan.crop_right < 8 and plan.crop_bottom < 8
            sw, sh = plan.scaled_size
            if max(w, h) >= 1600:
                assert max(sw, sh) == 1600
            # aspect preserved to better than a pixel before the crop
            assert abs(sw - w * plan.scale) < 1.0
            assert abs(sh - h * plan.scale) < 1.0

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            plan_resize(7, 100)


class TestApplyMask:
    def test_all_false_mask_is_noop(self):
        feats = feature_set([[5, 5], [20, 30]])
        mask = MaskImage(np.zeros((40, 40), bool))
        out = apply_mask(feats, mask, 0.0)
        np.testing.assert_array_equal(out.keypoints, feats.keypoints)
        np.testing.assert_array_equal(out.descriptors, feats.descriptors)

    def test_all_true_mask_empties(self):
        feats = feature_set([[5, 5], [20, 30]])
        out = apply_mask(feats, MaskImage(np.ones((40, 40), bool)), 0.0)
        assert len(out) == 0

    def test_rectangle_region_oracle(self):
        rng = np.random.default_rng(1)
        xy = rng.uniform(0, 40, size=(10, 2))
        xy[2] = [11, 11]
        xy[5] = [15, 18]
        xy[7] = [19.9, 19.9]
        xy[0] = [25, 25]
        mask_arr = np.zeros((40, 40), bool)
        mask_arr[10:20, 10:20] = True  # rows 10..19, cols 10..19
        inside = [i for i in range(10)
                  if 10 <= int(xy[i][0]) < 20 and 10 <= int(xy[i][1]) < 20]
        feats = feature_set(xy)
        out = apply_mask(feats, MaskImage(mask_arr), 0.0)
        assert len(out) == 10 - len(inside)
        survivors = [i for i in range(10) if i not in inside]
        # order preserved and descriptor rows stay aligned with keypoints
        np.testing.assert_array_equal(out.keypoints, feats.keypoints[survivors])
        np.testing.assert_array_equal(out.descriptors, feats.descriptors[survivors])

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        feats = feature_set(rng.uniform(0, 40, size=(30, 2)))
        mask = MaskImage(rng.random((40, 40)) < 0.3)
        once = apply_mask(feats, mask, 0.1)
        twice = apply_mask(once, mask, 0.1)
        np.testing.assert_array_equal(once.keypoints, twice.keypoints)
        np.testing.assert_array_equal(once.descriptors, twice.descriptors)

    def test_bottom_band(self):
        feats = feature_set([[5, 5], [5, 35], [5, 39]])
        out = apply_mask(feats, MaskImage(np.zeros((40, 40), bool)), 0.25)
        # band starts at y = 30
        np.testing.assert_array_equal(out.keypoints[:, 1], [5])

    def test_keypoint_outside_mask_raises(self):
        feats = feature_set([[50, 5]])
        with pytest.raises(DimensionMismatch):
            apply_mask(feats, MaskImage(np.zeros((40, 40), bool)), 0.0)

    def test_from_grayscale(self):
        mask = MaskImage.from_grayscale(np.array([[0, 128], [255, 0]], np.uint8))
        np.testing.assert_array_equal(mask.excluded,
                                      [[False, True], [True, False]])


class TestUndistort:
    def test_zero_coefficients_identity(self):
        cam = PinholeCamera(500, 500, 320, 240, 640, 480)
        pts = np.array([[12.5, 400.25], [320, 240]])
        np.testing.assert_array_equal(undistort_keypoints(cam, pts), pts)

    def test_principal_point_fixed_for_radial(self):
        cam = PinholeCamera(500, 500, 320, 240, 640, 480,
                            distortion=[-0.2, 0.05, 0, 0])
        out = undistort_keypoints(cam, [[320.0, 240.0]])
        np.testing.assert_allclose(out[0], [320.0, 240.0], atol=1e-12)

    def test_forward_round_trip_hand_case(self):
        cam = PinholeCamera(500, 500, 320, 240, 640, 480,
                            distortion=[-0.1, 0, 0, 0])
        out = undistort_keypoints(cam, [[400.0, 300.0]])
        xy = np.column_stack([(out[:, 0] - 320) / 500, (out[:, 1] - 240) / 500])
        fwd = distort_normalized(cam, xy)
        pix = np.column_stack([500 * fwd[:, 0] + 320, 500 * fwd[:, 1] + 240])
        np.testing.assert_allclose(pix, [[400.0, 300.0]], atol=1e-6)

    def test_round_trip_across_distortions(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            k1 = rng.uniform(-0.3, 0.3)
            cam = PinholeCamera(500, 500, 320, 240, 640, 480,
                                distortion=[k1, rng.uniform(-0.02, 0.02),
                                            rng.uniform(-1e-3, 1e-3),
                                            rng.uniform(-1e-3, 1e-3)])
            pts = np.column_stack([rng.uniform(0, 639, 25), rng.uniform(0, 479, 25)])
            out = undistort_keypoints(cam, pts)
            xy = np.column_stack([(out[:, 0] - 320) / 500, (out[:, 1] - 240) / 500])
            fwd = distort_normalized(cam, xy)
            pix = np.column_stack([500 * fwd[:, 0] + 320, 500 * fwd[:, 1] + 240])
            np.testing.assert_allclose(pix, pts, atol=1e-6)

    def test_no_convergence_reports_indices(self):
        cam = PinholeCamera(500, 500, 320, 240, 640, 480,
                            distortion=[-3.5, 0, 0, 0])
        with pytest.raises(NoConvergence) as err:
            undistort_keypoints(cam, [[320.0, 240.0], [639.0, 479.0]])
        assert 1 in err.value.indices
        assert 0 not in err.value.indices

    def test_empty_input(self):
        cam = PinholeCamera(500, 500, 320, 240, 640, 480)
        assert undistort_keypoints(cam, np.empty((0, 2))).shape == (0, 2)
