import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from rawldm.errors import ConfigError, ShapeError
from rawldm.isp import SRGB, ImagePlane
from rawldm.metrics import PSNR_CAP, SSIM_K1, SSIM_K2, psnr, ssim


def pair(seed, shape=(24, 20, 3), noise=0.1):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=shape)
    return a, np.clip(a + rng.normal(scale=noise, size=shape), 0, 1)


class TestPSNR:
    def test_identical(self):
        a, _ = pair(0)
        assert psnr(a, a) == PSNR_CAP == 99.0

    def test_closed_form(self):
        a = np.zeros((10, 10, 3))
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_max_val(self):
        a = np.zeros((4, 4))
        assert psnr(a, a + 25.5, max_val=255) == pytest.approx(20.0, abs=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_formula_oracle(self, seed):
        a, b = pair(seed)
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert abs(psnr(a, b) - 10 * math.log10(1 / mse)) < 1e-6

    def test_image_planes(self):
        a, b = (x.astype(np.float32) for x in pair(1))
        assert psnr(ImagePlane(a, SRGB), ImagePlane(b, SRGB)) == psnr(a, b)

    def test_shape(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSSIM:
    def test_identical(self):
        a, _ = pair(0)
        assert ssim(a, a) == 1.0

    def test_constants_luminance_only(self):
        c1, c2 = 0.2, 0.7
        a, b = np.full((16, 16, 3), c1), np.full((16, 16, 3), c2)
        C1 = (SSIM_K1 * 1.0) ** 2
        expected = (2 * c1 * c2 + C1) / (c1 * c1 + c2 * c2 + C1)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-9)
        assert SSIM_K2 == 0.03

    def test_symmetric(self):
        a, b = pair(3)
        assert ssim(a, b) == ssim(b, a)

    @pytest.mark.parametrize("seed", range(20))
    def test_reference_oracle(self, seed):
        a, b = pair(seed, noise=0.05 + 0.01 * seed)
        ref = structural_similarity(a, b, channel_axis=2, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0)
        assert abs(ssim(a, b) - ref) < 1e-4

    def test_grayscale(self):
        a, b = pair(4, shape=(16, 16))
        ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=1.0)
        assert abs(ssim(a, b) - ref) < 1e-4

    def test_range(self):
        a, b = pair(5)
        assert -1 <= ssim(a, 1 - a) <= 1

    def test_too_small(self):
        with pytest.raises(ConfigError):
            ssim(np.zeros((10, 30, 3)), np.ones((10, 30, 3)))

    def test_shape(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))
