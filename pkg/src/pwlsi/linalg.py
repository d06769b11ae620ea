"""Dense linear algebra and image containers shared by every other module.

Everything here is 64-bit float: truncation-interval boundaries and normal
tail masses downstream are precision sensitive. Pixel vectors are flat and
row-major; (height, width) metadata travels with them in :class:`Image`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class FactorizationError(Exception):
    """Cholesky factorization failed: the matrix is not positive definite."""


def pixels_of(x) -> np.ndarray:
    """Return the flat float64 pixel vector of an Image or array-like."""
    vec = np.asarray(getattr(x, "pixels", x), dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError(f"expected a flat pixel vector, got shape {vec.shape}")
    return vec


def infer_shape(n: int) -> tuple[int, int]:
    """Square (side, side) when n is a perfect square, else (1, n)."""
    side = int(round(np.sqrt(n)))
    return (side, side) if side * side == n else (1, n)


@dataclass(frozen=True)
class Image:
    """A flat row-major pixel vector together with its (height, width)."""

    pixels: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        pix = np.ascontiguousarray(self.pixels, dtype=np.float64)
        object.__setattr__(self, "pixels", pix)
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        h, w = self.shape
        if pix.ndim != 1 or pix.size != h * w or pix.size < 1:
            raise ValueError(f"pixel vector of size {pix.size} does not match shape {(h, w)}")
        if not np.all(np.isfinite(pix)):
            raise ValueError("pixel values must be finite")

    @property
    def n(self) -> int:
        return self.pixels.size


class CovMatrix:
    """Symmetric positive definite covariance with a cached Cholesky factor.

    Construction symmetrizes the input (after checking symmetry to 1e-12
    relative) and factorizes immediately. A single retry with diagonal
    jitter 1e-10 covers estimated covariances sitting on the PD boundary;
    a matrix with a non-positive diagonal entry is rejected outright.
    """

    def __init__(self, entries: np.ndarray):
        m = np.asarray(entries, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"covariance must be square, got shape {m.shape}")
        scale = float(np.abs(m).max()) if m.size else 0.0
        if scale > 0.0 and float(np.abs(m - m.T).max()) > 1e-12 * scale:
            raise ValueError("covariance is not symmetric to 1e-12 relative")
        m = 0.5 * (m + m.T)
        if np.any(np.diag(m) <= 0.0):
            raise FactorizationError("covariance has a non-positive diagonal entry")
        self.entries: np.ndarray = m
        self.n: int = m.shape[0]
        self._chol = self._factor(m)

    @staticmethod
    def _factor(m: np.ndarray) -> np.ndarray:
        try:
            return np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            pass
        try:
            return np.linalg.cholesky(m + 1e-10 * np.eye(m.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise FactorizationError("covariance is not positive definite") from exc

    @property
    def chol(self) -> np.ndarray:
        """Lower-triangular L with L L^T equal to the covariance."""
        return self._chol

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.entries @ np.asarray(v, dtype=np.float64)

    def solve(self, v: np.ndarray) -> np.ndarray:
        return cholesky_solve(self, v)

    @classmethod
    def identity(cls, n: int) -> "CovMatrix":
        return cls(np.eye(n))


def cholesky_solve(cov: CovMatrix, v: np.ndarray) -> np.ndarray:
    """Solve ``cov @ w = v`` through the cached Cholesky factor."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != cov.n:
        raise ValueError(f"dimension mismatch: matrix is {cov.n}, vector is {v.shape[0]}")
    return scipy.linalg.cho_solve((cov.chol, True), v)


def ar1_kron_cov(side: int, rho: float) -> CovMatrix:
    """Kronecker square of a first-order autoregressive covariance.

    The factor is the (side x side) matrix rho^|i-j|; the result is its
    Kronecker product with itself, covering a side-by-side pixel grid.
    """
    if side < 1:
        raise ValueError("side must be >= 1")
    if not abs(rho) < 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    idx = np.arange(side)
    ar1 = np.power(float(rho), np.abs(idx[:, None] - idx[None, :])) if rho != 0.0 else np.eye(side)
    return CovMatrix(np.kron(ar1, ar1))


def sample_gaussian(mean: np.ndarray, cov: CovMatrix, seed: int) -> Image:
    """Draw mean + L xi with xi standard normal; deterministic per seed."""
    mean = pixels_of(mean)
    if mean.shape[0] != cov.n:
        raise ValueError(f"dimension mismatch: mean is {mean.shape[0]}, cov is {cov.n}")
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(cov.n)
    return Image(mean + cov.chol @ xi, infer_shape(cov.n))
