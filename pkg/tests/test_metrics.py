"""Metric oracles: luma, PSNR, SSIM, bicubic resampling, reference warps."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from hitsr import metrics as MX
from hitsr.errors import ConfigurationError, DimensionError
from hitsr.tensor import Tensor


def rand_img(h, w, seed=0):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(h, w, 3))


# ---------------------------------------------------------------- luma

def test_luma_black_and_white_hit_studio_swing_limits():
    black = np.zeros((4, 4, 3))
    white = np.ones((4, 4, 3))
    npt.assert_allclose(MX.luma(black), 16.0 / 255.0, rtol=0, atol=1e-12)
    npt.assert_allclose(MX.luma(white), 235.0 / 255.0, rtol=0, atol=1e-12)


def test_luma_weighs_green_over_blue():
    green = np.zeros((2, 2, 3))
    green[..., 1] = 1.0
    blue = np.zeros((2, 2, 3))
    blue[..., 2] = 1.0
    assert MX.luma(green).mean() > MX.luma(blue).mean()


def test_luma_clamps_out_of_range_input():
    over = np.full((2, 2, 3), 2.0)
    npt.assert_array_equal(MX.luma(over), MX.luma(np.ones((2, 2, 3))))


def test_luma_rejects_non_rgb():
    with pytest.raises(DimensionError, match=r"\(4, 4\)"):
        MX.luma(np.zeros((4, 4)))


def test_rgb_to_ycbcr_y_matches_luma_on_batched_layout():
    img = rand_img(6, 5, seed=1)
    batched = Tensor(np.moveaxis(img, -1, 0)[None])
    y = MX.rgb_to_ycbcr_y(batched)
    assert y.data.shape == (1, 1, 6, 5)
    npt.assert_allclose(y.data[0, 0], MX.luma(img), rtol=0, atol=1e-6)


def test_rgb_to_ycbcr_y_rejects_bad_layout():
    with pytest.raises(DimensionError, match=r"\(1, 4, 8, 8\)"):
        MX.rgb_to_ycbcr_y(Tensor(np.zeros((1, 4, 8, 8))))


# ---------------------------------------------------------------- psnr

def test_psnr_constant_offset_closed_form():
    # uniform difference of 10/255: psnr = 20*log10(255/10)
    a = np.full((8, 8), 0.5)
    b = a + 10.0 / 255.0
    assert MX.psnr(a, b) == pytest.approx(28.1308, abs=1e-3)
    assert MX.psnr(a, b) == pytest.approx(20 * math.log10(25.5), abs=1e-12)


def test_psnr_identical_images_is_infinite():
    a = rand_img(8, 8, seed=2)[..., 0]
    assert MX.psnr(a, a) == math.inf


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError, match="differ"):
        MX.psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_against_direct_summation_oracle():
    g = np.random.default_rng(3)
    a = g.uniform(0, 1, size=(8, 8))
    b = g.uniform(0, 1, size=(8, 8))
    mse = sum((float(a[i, j]) - float(b[i, j])) ** 2
              for i in range(8) for j in range(8)) / 64.0
    assert MX.psnr(a, b) == pytest.approx(10 * math.log10(1.0 / mse), abs=1e-8)


# ---------------------------------------------------------------- ssim

def ssim_brute_force(a, b):
    """Direct-summation SSIM: explicit loops, no vectorized filtering."""
    size = min(11, a.shape[0], a.shape[1])
    if size % 2 == 0:
        size -= 1
    half = (size - 1) / 2
    w = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            w[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * 1.5 ** 2))
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for top in range(a.shape[0] - size + 1):
        for left in range(a.shape[1] - size + 1):
            pa = a[top:top + size, left:left + size]
            pb = b[top:top + size, left:left + size]
            mu1 = float((w * pa).sum())
            mu2 = float((w * pb).sum())
            v1 = float((w * pa * pa).sum()) - mu1 * mu1
            v2 = float((w * pb * pb).sum()) - mu2 * mu2
            cov = float((w * pa * pb).sum()) - mu1 * mu2
            vals.append(((2 * mu1 * mu2 + c1) * (2 * cov + c2))
                        / ((mu1 * mu1 + mu2 * mu2 + c1) * (v1 + v2 + c2)))
    return sum(vals) / len(vals)


def test_ssim_matches_brute_force_oracle_on_8x8():
    g = np.random.default_rng(4)
    a = g.uniform(0, 1, size=(8, 8))
    b = np.clip(a + g.normal(scale=0.05, size=(8, 8)), 0, 1)
    assert MX.ssim(a, b) == pytest.approx(ssim_brute_force(a, b), abs=1e-8)


def test_ssim_identical_images_is_one():
    a = rand_img(16, 16, seed=5)[..., 0]
    assert MX.ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_penalizes_noise():
    a = rand_img(32, 32, seed=6)[..., 0]
    noisy = np.clip(a + np.random.default_rng(7).normal(scale=0.2, size=a.shape), 0, 1)
    assert MX.ssim(a, noisy) < 0.9


def test_ssim_rejects_mismatched_or_tiny_input():
    with pytest.raises(DimensionError):
        MX.ssim(np.zeros((8, 8)), np.zeros((8, 7)))
    with pytest.raises(DimensionError, match="too small"):
        MX.ssim(np.zeros((0, 4)), np.zeros((0, 4)))


def test_y_metrics_ignore_pure_chroma_differences():
    # shift R up and B down so the luma is untouched: 65.481*dr == 24.966*db
    a = np.full((12, 12, 3), 0.5)
    b = a.copy()
    b[..., 0] += 0.024966
    b[..., 2] -= 0.065481
    assert MX.y_psnr(a, b) == math.inf
    assert MX.psnr(a, b) < 40.0  # the RGB difference itself is large


# ---------------------------------------------------------------- bicubic

def test_bicubic_scale_one_is_identity():
    img = rand_img(9, 7, seed=8)
    npt.assert_array_equal(MX.bicubic_resize(img, 1.0), img)


def test_bicubic_preserves_constants():
    img = np.full((16, 16, 3), 0.37)
    for scale in (0.25, 0.5, 2.0):
        out = MX.bicubic_resize(img, scale)
        npt.assert_allclose(out, 0.37, rtol=0, atol=1e-12)


def test_bicubic_downscale_has_linear_precision():
    # Catmull-Rom reproduces linear ramps: sample positions follow the
    # half-pixel convention si = (i + 0.5)/scale - 0.5
    ramp = np.linspace(0, 1, 64)[None, :, None] * np.ones((64, 1, 3))
    small = MX.bicubic_resize(ramp, 0.25)
    assert small.shape == (16, 16, 3)
    si = (np.arange(16) + 0.5) / 0.25 - 0.5
    expected = np.interp(si, np.arange(64), np.linspace(0, 1, 64))
    npt.assert_allclose(small[0, 1:-1, 0], expected[1:-1], rtol=0, atol=1e-12)


def test_bicubic_out_hw_matches_scale():
    img = rand_img(16, 12, seed=9)
    npt.assert_array_equal(MX.bicubic_resize(img, 0.25),
                           MX.bicubic_resize(img, 0.25, out_hw=(4, 3)))


def test_bicubic_rejects_empty_output():
    with pytest.raises(ConfigurationError, match="positive"):
        MX.bicubic_resize(rand_img(8, 8), 0.25, out_hw=(0, 2))


def test_resize_chw_agrees_with_hwc_resize():
    img = rand_img(8, 8, seed=10)
    chw = MX.resize_chw(np.moveaxis(img, -1, 0)[None], 2.0)
    npt.assert_allclose(np.moveaxis(chw[0], 0, -1),
                        MX.bicubic_resize(img, 2.0), rtol=0, atol=1e-12)


# ---------------------------------------------------------------- warps

def test_warp_scale_identity_is_bitwise():
    img = rand_img(16, 16, seed=11)
    npt.assert_array_equal(MX.warp_scale(img, 1.0), img)


def test_warp_scale_keeps_canvas_and_clamps_edges():
    img = rand_img(16, 16, seed=12)
    out = MX.warp_scale(img, 0.5)
    assert out.shape == img.shape
    const = MX.warp_scale(np.full((16, 16, 3), 0.4), 0.5)
    npt.assert_allclose(const, 0.4, rtol=0, atol=1e-12)


def test_warp_rotate_identity_and_full_turn_are_bitwise():
    img = rand_img(16, 16, seed=13)
    npt.assert_array_equal(MX.warp_rotate(img, 0.0), img)
    npt.assert_array_equal(MX.warp_rotate(img, 360.0), img)


def test_warp_rotate_quarter_turns_are_exact():
    # float cos(90deg) is ~6e-17, not 0; the quarter-turn path must not
    # smear integer sample coordinates
    img = rand_img(16, 16, seed=14)
    npt.assert_array_equal(MX.warp_rotate(img, 90.0), np.rot90(img, k=1))
    npt.assert_array_equal(MX.warp_rotate(img, 180.0), np.rot90(img, k=2))
    npt.assert_array_equal(MX.warp_rotate(img, 270.0), np.rot90(img, k=3))


def test_warp_rotate_fills_outside_with_black():
    ones = np.ones((17, 17, 3))
    out = MX.warp_rotate(ones, 45.0)
    assert out[0, 0, 0] == 0.0  # corner leaves the source footprint
    assert out[8, 8, 0] == pytest.approx(1.0, abs=1e-12)
