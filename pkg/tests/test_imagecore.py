import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from uwadv import imagecore as ic


def const(v, h=16, w=16):
    return np.full((3, h, w), v, dtype=np.float64)


def test_psnr_constant_gap_is_20db():
    assert ic.psnr(const(0.3), const(0.4)).value == pytest.approx(20.0, abs=1e-6)


def test_psnr_identical_is_infinite():
    m = ic.psnr(const(0.5), const(0.5))
    assert m.infinite and math.isinf(float(m))
    assert m.to_csv() == "inf"


def test_psnr_shape_mismatch():
    with pytest.raises(ic.ImageError):
        ic.psnr(const(0.1), const(0.1, 8, 8))


def test_ssim_black_vs_white():
    assert ic.ssim(const(0.0), const(1.0)).value == pytest.approx(0.0001 / 1.0001, abs=1e-7)


def test_ssim_self_is_one(rng):
    a = rng.random((3, 20, 24))
    assert ic.ssim(a, a).value == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_skimage(rng):
    a = rng.random((3, 32, 40))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ref = structural_similarity(
        a, b, channel_axis=0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0
    )
    assert ic.ssim(a, b).value == pytest.approx(ref, abs=1e-6)


def test_ssim_too_small():
    with pytest.raises(ic.ImageError):
        ic.ssim(const(0.2, 8, 8), const(0.2, 8, 8))


def test_yuv_of_pure_red():
    red = np.zeros((3, 1, 1))
    red[0] = 1.0
    yuv = ic.rgb_to_yuv(red)[:, 0, 0]
    np.testing.assert_allclose(yuv, [0.299, -0.14711, 0.61478], atol=1e-5)


def test_yuv_round_trip(rng):
    a = rng.random((3, 9, 7))
    assert np.max(np.abs(ic.yuv_to_rgb(ic.rgb_to_yuv(a)) - a)) <= 1e-5


def test_grayscale_has_no_chroma():
    yuv = ic.rgb_to_yuv(const(0.42, 4, 4))
    np.testing.assert_allclose(yuv[1:], 0.0, atol=1e-12)


def test_quantize_and_histogram():
    img = np.zeros((3, 2, 2))
    img[0] = 1.0
    img[1, 0, 0] = 0.5
    q = ic.quantize(img)
    assert q.dtype == np.uint8 and q[0, 0, 0] == 255 and q[1, 0, 0] == 128
    h = ic.histogram256(img)
    assert h.shape == (3, 256)
    assert h.sum(axis=1).tolist() == [4, 4, 4]
    assert h[0, 255] == 4


@pytest.mark.parametrize("bad", [np.zeros((2, 4, 4)), np.full((3, 4, 4), 1.5), np.full((3, 4, 4), np.nan)])
def test_check_image_rejects(bad):
    with pytest.raises(ic.ImageError):
        ic.check_image(bad)


def test_clamp01_rejects_nan():
    with pytest.raises(ic.ImageError):
        ic.clamp01(np.array([[[np.nan]]] * 3))


def test_png_round_trip(tmp_path, rng):
    img = ic.quantize(rng.random((3, 5, 6))).astype(np.float32) / 255
    ic.save_image(img, tmp_path / "a.png")
    back = ic.load_image(tmp_path / "a.png")
    assert back.dtype == np.float32 and back.shape == (3, 5, 6)
    np.testing.assert_array_equal(ic.quantize(back), ic.quantize(img))


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "x.png"
    p.write_bytes(b"not a png")
    with pytest.raises(ic.ImageError):
        ic.load_image(p)
