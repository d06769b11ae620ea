"""Hypothesis construction from detections: regions, contrasts, statistics.

The contrast vector splits the image into the detected region and its
complement with weights 1/|A| and -1/|A^c|, so the test statistic is the
difference of the two region means. A region that is empty or covers the
whole image leaves no complement to compare against and is untestable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import CovMatrix, Image, infer_shape, pixels_of


class UndefinedHypothesisError(Exception):
    """The detected region is empty or full: no testable contrast exists."""


@dataclass(frozen=True, eq=False)
class AnomalyRegion:
    """Set of detected pixel indices, stored as a boolean mask over [0, n)."""

    mask: np.ndarray

    def __post_init__(self):
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if mask.ndim != 1 or mask.size < 1:
            raise ValueError("region mask must be a nonempty 1-d boolean array")
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_indices(cls, indices, n: int) -> "AnomalyRegion":
        mask = np.zeros(n, dtype=bool)
        idx = np.asarray(list(indices), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError("region indices out of range")
        mask[idx] = True
        return cls(mask)

    @property
    def n(self) -> int:
        return self.mask.size

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    @property
    def complement_size(self) -> int:
        return self.n - self.size

    @property
    def is_testable(self) -> bool:
        return 0 < self.size < self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, AnomalyRegion):
            return NotImplemented
        return self.mask.size == other.mask.size and bool(np.array_equal(self.mask, other.mask))

    def __repr__(self) -> str:
        return f"AnomalyRegion(n={self.n}, indices={self.indices.tolist()})"


@dataclass(frozen=True)
class Hypothesis:
    """A contrast direction with its region, variance and observed statistic."""

    eta: np.ndarray
    region: AnomalyRegion
    variance: float
    observed_stat: float


def build_eta(region, n: int | None = None) -> np.ndarray:
    """Mean-difference contrast: 1/|A| on the region, -1/|A^c| elsewhere."""
    if not isinstance(region, AnomalyRegion):
        if n is None:
            raise ValueError("n is required when region is given as raw indices")
        region = AnomalyRegion.from_indices(region, n)
    elif n is not None and region.n != n:
        raise ValueError(f"region is over {region.n} pixels, expected {n}")
    if not region.is_testable:
        raise UndefinedHypothesisError(
            f"region of size {region.size} out of {region.n} pixels is untestable"
        )
    eta = np.where(region.mask, 1.0 / region.size, -1.0 / region.complement_size)
    return eta


def test_statistic(eta: np.ndarray, x, cov: CovMatrix) -> tuple[float, float]:
    """Observed statistic eta^T x and its null variance eta^T Sigma eta."""
    eta = np.asarray(eta, dtype=np.float64)
    x = pixels_of(x)
    if eta.shape[0] != x.shape[0] or eta.shape[0] != cov.n:
        raise ValueError("dimension mismatch between eta, image, and covariance")
    variance = float(eta @ cov.matvec(eta))
    if variance <= 0.0:
        raise ValueError(f"contrast variance must be positive, got {variance}")
    return float(eta @ x), variance


def make_hypothesis(region: AnomalyRegion, x, cov: CovMatrix) -> Hypothesis:
    eta = build_eta(region)
    stat, variance = test_statistic(eta, x, cov)
    return Hypothesis(eta=eta, region=region, variance=variance, observed_stat=stat)


def make_synthetic(
    n: int, delta: float, region_size: int, cov: CovMatrix, seed: int
) -> tuple[Image, AnomalyRegion]:
    """Plant a square patch of height delta at a random location in noise.

    The patch side is sqrt(region_size) (region_size must be a perfect
    square); delta = 0 produces a pure null image with s = 0.
    """
    if delta < 0.0:
        raise ValueError("delta must be >= 0")
    if cov.n != n:
        raise ValueError(f"covariance is {cov.n}x{cov.n}, expected n = {n}")
    side = int(round(np.sqrt(region_size)))
    if side * side != region_size:
        raise ValueError(f"region_size {region_size} is not a perfect square")
    h, w = infer_shape(n)
    if region_size > n or side > min(h, w):
        raise ValueError(f"patch of side {side} does not fit a {h}x{w} image")
    rng = np.random.default_rng(seed)
    r0 = int(rng.integers(0, h - side + 1))
    c0 = int(rng.integers(0, w - side + 1))
    mask = np.zeros(n, dtype=bool)
    for r in range(r0, r0 + side):
        mask[r * w + c0 : r * w + c0 + side] = True
    signal = np.where(mask, float(delta), 0.0)
    noise = cov.chol @ rng.standard_normal(n)
    return Image(signal + noise, (h, w)), AnomalyRegion(mask)


def estimate_cov(held_out) -> CovMatrix:
    """Sample covariance of held-out normal images with light diagonal loading."""
    rows = np.stack([pixels_of(img) for img in held_out])
    if rows.shape[0] < 2:
        raise ValueError("need at least 2 images to estimate a covariance")
    centered = rows - rows.mean(axis=0)
    sample = centered.T @ centered / (rows.shape[0] - 1)
    n = sample.shape[0]
    loading = 1e-6 * max(np.trace(sample) / n, 1e-30) + 1e-12
    return CovMatrix(sample + loading * np.eye(n))
