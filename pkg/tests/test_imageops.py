import numpy as np
import pytest

from edgevo.imageops import (InverseDepthMap, bilinear_sample,
                             bilinear_sample_with_gradient, downsample_half,
                             estimate_noise_sigma, gradient_magnitude,
                             high_gradient_mask, image_gradient, read_pgm,
                             write_pgm)


def bilinear_plane(h, w, a=3.0, bu=2.0, bv=5.0):
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    return a + bu * uu + bv * vv


def test_bilinear_exact_on_plane():
    img = bilinear_plane(40, 50)
    uv = np.array([[10.25, 3.75], [0.0, 0.0], [48.999, 38.5], [17.0, 22.0]])
    vals, valid = bilinear_sample(img, uv)
    assert valid.all()
    assert np.allclose(vals, 3.0 + 2.0 * uv[:, 0] + 5.0 * uv[:, 1], atol=1e-9)


def test_bilinear_integer_coords_match_pixels():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 255, (12, 17))
    uv = np.array([[3.0, 4.0], [0.0, 0.0], [16.0, 11.0]])
    vals, valid = bilinear_sample(img, uv)
    assert valid.all()
    assert np.allclose(vals, [img[4, 3], img[0, 0], img[11, 16]], atol=1e-12)


def test_bilinear_out_of_bounds():
    img = bilinear_plane(10, 10)
    uv = np.array([[-0.5, 3.0], [9.01, 5.0], [4.0, 9.5], [4.0, -0.01]])
    vals, valid = bilinear_sample(img, uv)
    assert not valid.any()
    assert np.isnan(vals).all()


def test_bilinear_gradient_on_plane():
    img = bilinear_plane(30, 30)
    uv = np.array([[5.5, 7.25], [12.75, 3.5]])
    vals, grads, valid = bilinear_sample_with_gradient(img, uv)
    assert valid.all()
    assert np.allclose(grads, [[2.0, 5.0], [2.0, 5.0]], atol=1e-9)


def test_bilinear_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 255, (25, 25))
    uv = rng.uniform(2.3, 20.3, (40, 2))  # fractional parts keep off cell edges
    _, grads, _ = bilinear_sample_with_gradient(img, uv)
    h = 1e-6
    for k, e in enumerate((np.array([h, 0.0]), np.array([0.0, h]))):
        vp, _ = bilinear_sample(img, uv + e)
        vm, _ = bilinear_sample(img, uv - e)
        assert np.allclose(grads[:, k], (vp - vm) / (2 * h), atol=1e-5)


def test_image_gradient_on_plane():
    gx, gy = image_gradient(bilinear_plane(20, 20))
    assert np.allclose(gx[1:-1, 1:-1], 2.0, atol=1e-12)
    assert np.allclose(gy[1:-1, 1:-1], 5.0, atol=1e-12)
    assert np.allclose(gradient_magnitude(bilinear_plane(20, 20))[1:-1, 1:-1],
                       np.hypot(2.0, 5.0), atol=1e-12)


def test_high_gradient_mask():
    img = np.zeros((20, 20))
    img[:, 10:] = 100.0
    mask = high_gradient_mask(img, 10.0)
    assert mask[5, 9] and mask[5, 10]
    assert not mask[5, 2] and not mask[5, 17]


def test_estimate_noise_sigma_flat():
    rng = np.random.default_rng(7)
    flat = np.full((200, 200), 128.0)
    assert estimate_noise_sigma(flat) == pytest.approx(0.0, abs=1e-12)
    noisy = flat + 4.0 * rng.standard_normal(flat.shape)
    assert 3.5 < estimate_noise_sigma(noisy) < 4.5


def test_estimate_noise_sigma_resists_structure(box_frames):
    """The difference-of-Laplacians estimator should report the injected
    noise level on a structured image, not the texture contrast."""
    img = box_frames[0].image
    assert estimate_noise_sigma(img) < 2.0
    rng = np.random.default_rng(8)
    noisy = img + 5.0 * rng.standard_normal(img.shape)
    assert 4.0 < estimate_noise_sigma(noisy) < 6.0


def test_downsample_half_block_mean():
    img = np.arange(16, dtype=float).reshape(4, 4)
    out = downsample_half(img)
    assert out.shape == (2, 2)
    assert np.allclose(out, [[2.5, 4.5], [10.5, 12.5]])


def test_downsample_half_odd_sizes():
    out = downsample_half(np.ones((5, 7)))
    assert out.shape == (2, 3)
    assert np.allclose(out, 1.0)


def test_inverse_depth_map_empty_and_defined():
    m = InverseDepthMap.empty(6, 8)
    assert m.mean.shape == (6, 8)
    assert not m.defined_mask().any()
    m.mean[2, 3] = 0.5
    m.variance[2, 3] = 0.01
    assert m.defined_mask().sum() == 1


def test_inverse_depth_map_copy_is_independent():
    m = InverseDepthMap.empty(4, 4)
    m.mean[1, 1] = 1.0
    m.variance[1, 1] = 0.1
    c = m.copy()
    c.mean[1, 1] = 2.0
    assert m.mean[1, 1] == 1.0


def test_decimate_half_picks_min_variance():
    mean = np.full((2, 2), np.nan)
    var = np.full((2, 2), np.nan)
    mean[0, 0], var[0, 0] = 10.0, 1.0
    mean[0, 1], var[0, 1] = 20.0, 0.5
    mean[1, 0], var[1, 0] = 30.0, 2.0
    mean[1, 1], var[1, 1] = 40.0, 3.0
    out = InverseDepthMap(mean, var).decimate_half()
    assert out.mean.shape == (1, 1)
    assert out.mean[0, 0] == 20.0 and out.variance[0, 0] == 0.5


def test_decimate_half_empty_block_stays_undefined():
    out = InverseDepthMap.empty(2, 2).decimate_half()
    assert not out.defined_mask().any()


def test_depth_map_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    mean = np.where(rng.random((10, 12)) < 0.5, rng.uniform(0.1, 2, (10, 12)), np.nan)
    var = np.where(np.isfinite(mean), rng.uniform(1e-4, 1e-2, (10, 12)), np.nan)
    m = InverseDepthMap(mean, var)
    path = tmp_path / "depth.bin"
    m.save(path)
    r = InverseDepthMap.load(path)
    assert np.array_equal(r.mean, m.mean, equal_nan=True)
    assert np.array_equal(r.variance, m.variance, equal_nan=True)


def test_depth_map_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bogus.bin"
    path.write_bytes(b"NOTDEPTH" + b"\x00" * 64)
    with pytest.raises(ValueError):
        InverseDepthMap.load(path)


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.uniform(0, 255, (16, 20))
    path = tmp_path / "img.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert back.shape == img.shape
    assert np.abs(back - img).max() < 1.0 / 256.0
    assert path.read_bytes().startswith(b"P5")
