import numpy as np
import pytest

from pwlsi import (CovMatrix, FactorizationError, ar1_kron_cov, cholesky_solve,
                   sample_gaussian)
from pwlsi.linalg import Image, infer_shape


def random_spd(n, rng):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


class TestCholeskySolve:
    def test_identity(self):
        cov = CovMatrix.identity(3)
        np.testing.assert_allclose(cholesky_solve(cov, np.array([1.0, 2.0, 3.0])),
                                   [1.0, 2.0, 3.0])

    def test_scalar_diagonal(self):
        cov = CovMatrix(np.array([[4.0]]))
        np.testing.assert_allclose(cholesky_solve(cov, np.array([8.0])), [2.0])

    def test_random_spd_residual(self):
        rng = np.random.default_rng(0)
        m = random_spd(5, rng)
        cov = CovMatrix(m)
        v = rng.standard_normal(5)
        w = cholesky_solve(cov, v)
        assert np.linalg.norm(m @ w - v) / np.linalg.norm(v) <= 1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cholesky_solve(CovMatrix.identity(3), np.zeros(4))


class TestAr1KronCov:
    def test_reference_entry(self):
        cov = ar1_kron_cov(2, 0.25)
        # factor [[1, .25], [.25, 1]]; the ((0,0),(1,1)) entry of the
        # Kronecker square is 0.25 * 0.25
        assert cov.entries[0, 3] == pytest.approx(0.0625)
        np.testing.assert_allclose(cov.entries[:2, :2], [[1.0, 0.25], [0.25, 1.0]])

    def test_rho_zero_identity(self):
        np.testing.assert_array_equal(ar1_kron_cov(3, 0.0).entries, np.eye(9))

    def test_elementwise_formula(self):
        # brute-force oracle: entry = rho^(|i1-j1| + |i2-j2|)
        side, rho = 3, 0.25
        cov = ar1_kron_cov(side, rho)
        expected = np.empty((9, 9))
        for i1 in range(side):
            for i2 in range(side):
                for j1 in range(side):
                    for j2 in range(side):
                        expected[i1 * side + i2, j1 * side + j2] = rho ** (
                            abs(i1 - j1) + abs(i2 - j2)
                        )
        np.testing.assert_allclose(cov.entries, expected, atol=1e-15)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            ar1_kron_cov(2, 1.0)
        with pytest.raises(ValueError):
            ar1_kron_cov(0, 0.5)

    @pytest.mark.parametrize("side,rho", [(4, 0.9), (8, 0.9), (8, -0.9)])
    def test_symmetric_and_pd(self, side, rho):
        cov = ar1_kron_cov(side, rho)
        np.testing.assert_array_equal(cov.entries, cov.entries.T)
        assert np.all(np.linalg.eigvalsh(cov.entries) > 0)

    def test_largest_desk_scale_factorizes(self):
        # side 64 means a 4096x4096 covariance; construction runs Cholesky
        cov = ar1_kron_cov(64, 0.9)
        np.testing.assert_array_equal(cov.entries, cov.entries.T)
        assert cov.chol.shape == (4096, 4096)


class TestSampleGaussian:
    def test_mean_convergence(self):
        cov = CovMatrix.identity(4)
        draws = np.stack(
            [sample_gaussian(np.zeros(4), cov, seed=s).pixels for s in range(100_000)]
        )
        bound = 4.0 / np.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0)) < bound)

    def test_empirical_covariance(self):
        rng = np.random.default_rng(3)
        m = random_spd(16, rng) / 16.0
        cov = CovMatrix(m)
        rng2 = np.random.default_rng(99)
        xi = rng2.standard_normal((100_000, 16))
        draws = xi @ cov.chol.T
        emp = draws.T @ draws / draws.shape[0]
        assert np.linalg.norm(emp - m) / np.linalg.norm(m) < 0.05

    def test_determinism(self):
        cov = ar1_kron_cov(3, 0.25)
        a = sample_gaussian(np.zeros(9), cov, seed=5)
        b = sample_gaussian(np.zeros(9), cov, seed=5)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_degenerate_cov_rejected(self):
        with pytest.raises(FactorizationError):
            CovMatrix(np.zeros((2, 2)))

    def test_mean_offset(self):
        mean = np.arange(4.0)
        img = sample_gaussian(mean, CovMatrix.identity(4), seed=0)
        rng = np.random.default_rng(0)
        np.testing.assert_allclose(img.pixels, mean + rng.standard_normal(4))


class TestCovMatrix:
    def test_asymmetry_rejected(self):
        m = np.eye(3)
        m[0, 1] = 1e-6
        with pytest.raises(ValueError):
            CovMatrix(m)

    def test_jitter_retry(self):
        # singular but nonnegative: jitter makes the factorization succeed
        v = np.ones((3, 1))
        m = v @ v.T + 1e-13 * np.diag([1.0, 2.0, 3.0])
        cov = CovMatrix(m)
        assert cov.chol.shape == (3, 3)

    def test_non_square(self):
        with pytest.raises(ValueError):
            CovMatrix(np.zeros((2, 3)))


class TestImage:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Image(np.zeros(5), (2, 2))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Image(np.array([1.0, np.nan]), (1, 2))

    def test_infer_shape(self):
        assert infer_shape(64) == (8, 8)
        assert infer_shape(12) == (1, 12)
