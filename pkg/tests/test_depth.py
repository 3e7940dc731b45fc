"""Depth calibration, unprojection, and depth-container round trips."""

import numpy as np
import pytest

from desktwin import depth
from desktwin.errors import DegenerateDepth, EmptyOverlap, NegativeScale

K = depth.CameraIntrinsics(fx=320.0, fy=320.0, cx=159.5, cy=119.5)


def synthetic_pair(alpha=2.0, beta=0.5, outlier_frac=0.2, shape=(60, 80), seed=7):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0.5, 3.0, shape)
    ref = alpha * raw + beta
    n_out = int(outlier_frac * ref.size)
    idx = rng.choice(ref.size, n_out, replace=False)
    flat = ref.ravel().copy()
    flat[idx] += rng.uniform(0.5, 2.0, n_out) * rng.choice([-1, 1], n_out)
    flat = np.maximum(flat, 0.05)
    ref = flat.reshape(shape)
    mask = np.ones(shape, dtype=bool)
    return depth.DepthMap(raw, mask), depth.DepthMap(ref, mask)


class TestFitScaleShift:
    def test_exact_recovery_without_outliers(self):
        raw, ref = synthetic_pair(outlier_frac=0.0)
        res = depth.fit_scale_shift(raw, ref)
        assert res.alpha == pytest.approx(2.0, abs=1e-9)
        assert res.beta == pytest.approx(0.5, abs=1e-9)

    def test_robust_recovery_with_gross_outliers(self):
        raw, ref = synthetic_pair(outlier_frac=0.2)
        res = depth.fit_scale_shift(raw, ref)
        assert res.alpha == pytest.approx(2.0, abs=1e-3)
        assert res.beta == pytest.approx(0.5, abs=1e-3)
        assert res.inlier_count >= 0.7 * raw.values.size

    def test_residual_history_non_increasing_tail(self):
        raw, ref = synthetic_pair(outlier_frac=0.2)
        res = depth.fit_scale_shift(raw, ref)
        hist = np.array(res.residual_history)
        assert len(hist) >= 2
        # robust RMS should not get worse after the first reweighting
        assert hist[-1] <= hist[0] + 1e-12

    def test_only_joint_valid_pixels_used(self):
        raw, ref = synthetic_pair(outlier_frac=0.0)
        # corrupt pixels that are masked out on one side; fit must ignore them
        raw.mask[:10] = False
        ref.values[:10] = 99.0
        res = depth.fit_scale_shift(raw, ref)
        assert res.alpha == pytest.approx(2.0, abs=1e-9)

    def test_empty_overlap_raises(self):
        raw, ref = synthetic_pair(outlier_frac=0.0)
        raw.mask[:] = False
        with pytest.raises(EmptyOverlap):
            depth.fit_scale_shift(raw, ref)

    def test_constant_raw_depth_raises(self):
        shape = (20, 20)
        mask = np.ones(shape, dtype=bool)
        raw = depth.DepthMap(np.full(shape, 1.5), mask)
        ref = depth.DepthMap(np.full(shape, 2.5), mask)
        with pytest.raises(DegenerateDepth):
            depth.fit_scale_shift(raw, ref)

    def test_negative_scale_raises(self):
        rng = np.random.default_rng(0)
        shape = (20, 20)
        mask = np.ones(shape, dtype=bool)
        raw_v = rng.uniform(0.5, 3.0, shape)
        ref_v = np.maximum(-1.0 * raw_v + 5.0, 0.05)  # inverted relation
        with pytest.raises(NegativeScale):
            depth.fit_scale_shift(depth.DepthMap(raw_v, mask), depth.DepthMap(ref_v, mask))

    def test_shape_mismatch_raises(self):
        raw, _ = synthetic_pair(shape=(10, 10), outlier_frac=0.0)
        _, ref = synthetic_pair(shape=(12, 12), outlier_frac=0.0)
        with pytest.raises(ValueError):
            depth.fit_scale_shift(raw, ref)


class TestApplyCalibration:
    def test_affine_map_applied(self):
        raw, _ = synthetic_pair(outlier_frac=0.0)
        calib = depth.CalibrationResult(2.0, 0.5, 0, 0.0)
        (out,) = depth.apply_calibration([raw], calib)
        np.testing.assert_allclose(out.values[out.mask], 2.0 * raw.values[raw.mask] + 0.5)

    def test_nonpositive_results_invalidated(self):
        shape = (5, 5)
        mask = np.ones(shape, dtype=bool)
        raw = depth.DepthMap(np.full(shape, 1.0), mask)
        calib = depth.CalibrationResult(1.0, -2.0, 0, 0.0)
        (out,) = depth.apply_calibration([raw], calib)
        assert not out.mask.any()


class TestProjection:
    def test_unproject_forward_project_round_trip(self):
        raw, _ = synthetic_pair(outlier_frac=0.0, shape=(24, 32))
        cloud = depth.unproject(raw, K)
        uvd = depth.forward_project(cloud.points, K)
        v, u = np.nonzero(raw.mask)
        np.testing.assert_allclose(uvd[:, 0], u, atol=1e-9)
        np.testing.assert_allclose(uvd[:, 1], v, atol=1e-9)
        np.testing.assert_allclose(uvd[:, 2], raw.values[v, u], atol=1e-12)

    def test_principal_point_ray(self):
        values = np.full((4, 4), 2.0)
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 2] = True
        k = depth.CameraIntrinsics(100.0, 100.0, 2.0, 1.0)
        cloud = depth.unproject(depth.DepthMap(values, mask), k)
        np.testing.assert_allclose(cloud.points[0], [0.0, 0.0, 2.0])


class TestDepthContainer:
    def test_round_trip(self, tmp_path):
        raw, _ = synthetic_pair(outlier_frac=0.0, shape=(17, 23))
        raw.mask[3, :5] = False
        raw.values[3, :5] = 0.0
        raw = depth.DepthMap(raw.values, raw.mask)
        path = tmp_path / "frame.pwdm"
        depth.save_depth(path, raw)
        back = depth.load_depth(path)
        np.testing.assert_array_equal(back.mask, raw.mask)
        np.testing.assert_allclose(
            back.values[back.mask], raw.values[raw.mask].astype(np.float32), rtol=0, atol=0
        )

    def test_header_layout(self, tmp_path):
        raw, _ = synthetic_pair(outlier_frac=0.0, shape=(6, 9))
        path = tmp_path / "frame.pwdm"
        depth.save_depth(path, raw)
        blob = path.read_bytes()
        assert blob[:4] == b"PWDM"
        assert int.from_bytes(blob[4:8], "little") == 9   # width
        assert int.from_bytes(blob[8:12], "little") == 6  # height
        assert len(blob) == 12 + 4 * 54 + 54

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.pwdm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            depth.load_depth(path)
