"""Bicubic resampling: kernel facts, analytic cases and a Pillow oracle."""

import numpy as np
import pytest
from PIL import Image

from span_sr.resample import bicubic_downscale, bicubic_upscale, keys_kernel, resize_matrix
from span_sr.tensor import ShapeError


class TestKernel:
    def test_interpolating(self):
        assert keys_kernel(np.array([0.0]))[0] == 1.0
        assert np.all(keys_kernel(np.array([1.0, 2.0, -1.0, 2.5])) == 0.0)

    def test_partition_of_unity(self):
        for t in np.linspace(0, 1, 11):
            taps = np.arange(-1, 3) - t
            assert abs(keys_kernel(taps).sum() - 1.0) < 1e-12

    @pytest.mark.parametrize("n_in,n_out", [(8, 4), (12, 4), (5, 15), (7, 7)])
    def test_rows_sum_to_one(self, n_in, n_out):
        np.testing.assert_allclose(resize_matrix(n_in, n_out).sum(axis=1), 1.0, atol=1e-12)

    def test_cached_matrix_is_read_only(self):
        with pytest.raises(ValueError):
            resize_matrix(8, 4)[0, 0] = 1.0


class TestDownscale:
    def test_constant(self):
        x = np.full((1, 3, 12, 8), 0.37, np.float32)
        assert np.max(np.abs(bicubic_downscale(x, 4) - 0.37)) <= 1e-6

    def test_identity(self):
        x = np.random.default_rng(0).random((1, 3, 5, 7)).astype(np.float32)
        assert np.max(np.abs(bicubic_downscale(x, 1) - x)) <= 1e-6

    def test_linear_ramp(self):
        w = 64
        ramp = np.tile(np.arange(w, dtype=np.float64), (1, 1, 8, 1)) / w
        out = bicubic_downscale(ramp, 2)
        # sample centres of the half-size grid sit at 2j + 0.5 in input pixels
        want = (2 * np.arange(w // 2) + 0.5) / w
        interior = slice(3, w // 2 - 3)
        rel = np.abs(out[0, 0, :, interior] - want[interior]) / want[interior]
        assert rel.max() <= 1e-3

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            bicubic_downscale(np.zeros((1, 3, 9, 8)), 2)

    @pytest.mark.parametrize("r", [2, 3, 4])
    def test_matches_pillow_interior(self, r):
        # Pillow's float-mode bicubic uses the same antialiased Keys kernel;
        # it renormalizes at borders instead of clamping, so compare interiors
        a = np.random.default_rng(r).random((48, 60)).astype(np.float32)
        ours = bicubic_downscale(a[None, None].astype(np.float64), r)[0, 0]
        pil = np.asarray(Image.fromarray(a, mode="F").resize((60 // r, 48 // r), Image.BICUBIC))
        m = 3
        assert np.max(np.abs(ours - pil)[m:-m, m:-m]) <= 1e-6


class TestUpscale:
    def test_constant(self):
        x = np.full((1, 3, 4, 5), 0.8, np.float32)
        assert np.max(np.abs(bicubic_upscale(x, 3) - 0.8)) <= 1e-6

    def test_identity(self):
        x = np.random.default_rng(1).random((1, 3, 4, 4)).astype(np.float32)
        assert np.max(np.abs(bicubic_upscale(x, 1) - x)) <= 1e-6

    def test_shape(self):
        assert bicubic_upscale(np.zeros((2, 3, 5, 7)), 4).shape == (2, 3, 20, 28)

    def test_round_trip_smooth_gradient(self):
        yy, xx = np.mgrid[0:64, 0:64] / 64.0
        img = np.stack([0.2 + 0.6 * xx, 0.3 + 0.4 * yy, 0.5 + 0.2 * (xx + yy) / 2])[None]
        back = bicubic_upscale(bicubic_downscale(img, 2), 2)
        m = 8
        assert np.max(np.abs(back - img)[:, :, m:-m, m:-m]) <= 2.0 / 255.0

    @pytest.mark.parametrize("r", [2, 3, 4])
    def test_matches_pillow_interior(self, r):
        a = np.random.default_rng(10 + r).random((10, 12)).astype(np.float32)
        ours = bicubic_upscale(a[None, None].astype(np.float64), r)[0, 0]
        pil = np.asarray(Image.fromarray(a, mode="F").resize((12 * r, 10 * r), Image.BICUBIC))
        m = 2 * r
        assert np.max(np.abs(ours - pil)[m:-m, m:-m]) <= 1e-6

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            bicubic_upscale(np.zeros((1, 1, 2, 2)), 0)
