import numpy as np
import pytest

from pwlsi import operators


def brute_conv(image_chw, kernel, stride, padding):
    """Nested-loop zero-padded convolution, the oracle for the matrix form."""
    c_in, h, w = image_chw.shape
    c_out, _, k, _ = kernel.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for co in range(c_out):
        for orow in range(oh):
            for ocol in range(ow):
                acc = 0.0
                for ci in range(c_in):
                    for dr in range(k):
                        for dc in range(k):
                            r = orow * stride - padding + dr
                            c = ocol * stride - padding + dc
                            if 0 <= r < h and 0 <= c < w:
                                acc += kernel[co, ci, dr, dc] * image_chw[ci, r, c]
                out[co, orow, ocol] = acc
    return out


@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 1)])
def test_conv_matrix_matches_brute_force(stride, padding):
    rng = np.random.default_rng(0)
    c_in, c_out, k, h, w = 2, 3, 3, 5, 4
    kernel = rng.standard_normal((c_out, c_in, k, k))
    image = rng.standard_normal((c_in, h, w))
    mat, oh, ow = operators.conv2d_matrix(kernel, h, w, stride, padding)
    got = (mat @ image.ravel()).reshape(c_out, oh, ow)
    np.testing.assert_allclose(got, brute_conv(image, kernel, stride, padding), atol=1e-12)


def test_mean_filter_constant_invariance():
    mat = operators.mean_filter_matrix(4, 4, 3)
    np.testing.assert_allclose(mat @ np.full(16, 2.5), np.full(16, 2.5))


def test_mean_filter_corner_uses_in_bounds_cells():
    mat = operators.mean_filter_matrix(3, 3, 3)
    # corner pixel (0,0) averages over the 2x2 in-bounds neighbourhood
    expected = np.zeros(9)
    expected[[0, 1, 3, 4]] = 0.25
    np.testing.assert_allclose(mat[0], expected)
    # centre pixel averages over all nine
    np.testing.assert_allclose(mat[4], np.full(9, 1.0 / 9.0))


def test_mean_filter_rejects_even_window():
    with pytest.raises(ValueError):
        operators.mean_filter_matrix(4, 4, 2)


def test_mean_pool_matrix():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(16)
    mat = operators.mean_pool_matrix(4, 4, 2)
    got = mat @ x
    grid = x.reshape(4, 4)
    expected = grid.reshape(2, 2, 2, 2).mean(axis=(1, 3)).ravel()
    np.testing.assert_allclose(got, expected)


def test_pool_windows_divisibility():
    with pytest.raises(ValueError):
        operators.pool_windows(5, 4, 2)


def test_pool_windows_cells():
    table = operators.pool_windows(4, 4, 2, channels=2)
    assert table.shape == (2 * 4, 4)
    # first window of channel 0: rows 0-1, cols 0-1
    np.testing.assert_array_equal(sorted(table[0]), [0, 1, 4, 5])
    # channel offset: second channel starts at 16
    assert table[4].min() >= 16


def test_upsample_matrix_nearest():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(4)
    mat = operators.upsample_matrix(2, 2, 2)
    got = (mat @ x).reshape(4, 4)
    expected = np.repeat(np.repeat(x.reshape(2, 2), 2, axis=0), 2, axis=1)
    np.testing.assert_allclose(got, expected)
