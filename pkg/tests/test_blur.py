import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from bluralign.blur import (
    BlurConfig,
    blend_backward,
    blur_matrix,
    center_blur,
    center_weight_map,
    compute_saliency,
    default_sigma,
    gaussian_blur,
    gaussian_blur_adjoint,
    gaussian_kernel1d,
    saliency_blur,
)


def dense_blur(img, sigma):
    """Brute-force 2-D convolution with symmetric padding."""
    kern = gaussian_kernel1d(sigma)
    r = kern.size // 2
    k2 = np.outer(kern, kern)
    pad = np.pad(img, ((r, r), (r, r), (0, 0)), mode="symmetric")
    out = np.zeros_like(img)
    h, w, _ = img.shape
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            out += k2[dy, dx] * pad[dy:dy + h, dx:dx + w]
    return out


def test_blur_matches_dense_convolution(rng):
    img = rng.uniform(size=(9, 13, 3))
    np.testing.assert_allclose(gaussian_blur(img, 1.7), dense_blur(img, 1.7), atol=1e-13)


def test_blur_matches_scipy_reflect(rng):
    img = rng.uniform(size=(20, 17, 3))
    ref = ndimage.gaussian_filter(img, sigma=(2.0, 2.0, 0), truncate=3.0, mode="reflect")
    np.testing.assert_allclose(gaussian_blur(img, 2.0), ref, atol=1e-12)


def test_kernel_sums_to_one_and_radius():
    k = gaussian_kernel1d(2.3)
    assert k.size == 2 * math.ceil(6.9) + 1
    assert abs(k.sum() - 1.0) < 1e-15


def test_blur_matrix_doubly_stochastic():
    mat = blur_matrix(7, 3.0)  # radius larger than the signal
    np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-14)
    np.testing.assert_allclose(mat.sum(axis=0), 1.0, atol=1e-14)


def test_adjoint_dot_product(rng):
    x = rng.standard_normal((11, 8, 3))
    y = rng.standard_normal((11, 8, 3))
    lhs = np.sum(gaussian_blur(x, 1.5) * y)
    rhs = np.sum(x * gaussian_blur_adjoint(y, 1.5))
    assert abs(lhs - rhs) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.3, 4.0), st.integers(3, 12), st.integers(3, 12))
def test_constant_image_preserved(value, sigma, h, w):
    img = np.full((h, w, 3), value)
    np.testing.assert_allclose(gaussian_blur(img, sigma), img, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.3, 4.0))
def test_mean_preserved(seed, sigma):
    img = np.random.default_rng(seed).uniform(size=(10, 9, 3))
    np.testing.assert_allclose(gaussian_blur(img, sigma).mean(axis=(0, 1)), img.mean(axis=(0, 1)), atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.floats(0.1, 6.0))
def test_blend_outputs_are_convex(seed, w0, g):
    img = np.random.default_rng(seed).uniform(size=(12, 12, 3))
    cfg = BlurConfig(sigma=1.5, w0=w0, g=g)
    blurred = gaussian_blur(img, cfg)
    lo = np.minimum(img, blurred) - 1e-12
    hi = np.maximum(img, blurred) + 1e-12
    for out, w in (saliency_blur(img, compute_saliency(img, (2,)), cfg), center_blur(img, cfg)):
        assert np.all((out >= lo) & (out <= hi))
        assert np.all((w >= 0) & (w <= 1 - w0 + 1e-15))


def test_w0_one_is_pure_blur(rng):
    img = rng.uniform(size=(20, 20, 3))
    cfg = BlurConfig(sigma=2.0, w0=1.0)
    blurred = gaussian_blur(img, cfg)
    np.testing.assert_array_equal(saliency_blur(img, compute_saliency(img), cfg)[0], blurred)
    np.testing.assert_array_equal(center_blur(img, cfg)[0], blurred)


def test_center_weight_hand_values():
    cfg = BlurConfig(w0=0.5, g=3.0)
    w = center_weight_map(5, 5, cfg)
    assert w[2, 2] == pytest.approx(0.5, abs=1e-15)
    # corner pixel is exactly one center-to-corner distance away
    assert w[0, 0] == pytest.approx(0.5 * math.exp(-3.0), abs=1e-15)
    assert w[0, 4] == w[4, 0] == w[4, 4] == w[0, 0]
    # edge midpoint is at 2 / (2 sqrt 2)
    assert w[0, 2] == pytest.approx(0.5 * math.exp(-3.0 / math.sqrt(2)), abs=1e-15)


def test_center_weight_radially_decreasing():
    w = center_weight_map(31, 31, BlurConfig())
    assert np.all(np.diff(w[15, 15:]) < 0)


def test_saliency_range_and_constant():
    img = np.zeros((20, 20, 3))
    img[8:12, 8:12] = [1.0, 0.0, 0.0]
    sal = compute_saliency(img)
    assert sal.min() == 0.0 and sal.max() == 1.0
    assert sal[10, 10] > sal[0, 0]
    np.testing.assert_array_equal(compute_saliency(np.full((20, 20, 3), 0.3)), 0.0)


def test_saliency_channel_permutation_invariant(rng):
    img = rng.uniform(size=(24, 24, 3))
    np.testing.assert_allclose(compute_saliency(img), compute_saliency(img[..., [2, 0, 1]]), atol=1e-12)


def test_saliency_errors():
    img = np.zeros((10, 10, 3))
    with pytest.raises(ValueError):
        compute_saliency(img, ())
    with pytest.raises(ValueError):
        compute_saliency(img, (5,))
    with pytest.raises(ValueError):
        compute_saliency(np.zeros((10, 10)))


def test_config_validation():
    with pytest.raises(ValueError):
        BlurConfig(sigma=0.0)
    with pytest.raises(ValueError):
        BlurConfig(w0=1.5)
    with pytest.raises(ValueError):
        BlurConfig(g=-1.0)
    assert default_sigma(224, 300) == 10.0
    assert BlurConfig.for_size(112, 112).sigma == 5.0


def test_saliency_map_validation(rng):
    img = rng.uniform(size=(8, 8, 3))
    with pytest.raises(ValueError):
        saliency_blur(img, np.zeros((7, 8)), BlurConfig(sigma=1.0))
    with pytest.raises(ValueError):
        saliency_blur(img, np.full((8, 8), 1.5), BlurConfig(sigma=1.0))


def test_blend_backward_matches_explicit_jacobian(rng):
    img = rng.uniform(size=(5, 4, 3))
    cfg = BlurConfig(sigma=1.0, w0=0.3)
    _, w = center_blur(img, cfg)
    grad = rng.standard_normal(img.shape)
    jac = np.zeros((img.size, img.size))
    for k in range(img.size):
        e = np.zeros(img.size)
        e[k] = 1.0
        jac[:, k] = center_blur(e.reshape(img.shape), cfg)[0].ravel()
    np.testing.assert_allclose(blend_backward(grad, w, cfg).ravel(), jac.T @ grad.ravel(), atol=1e-13)
