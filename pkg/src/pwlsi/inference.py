"""Parametric sweep, truncated-normal numerics, and the four p-values.

The sweep walks the line parameter from z_min to z_max, querying one piece
per step and jumping to just past its upper end; pieces whose assigned
region matches the observed one are unioned into the truncation set. The
selective p-value is the two-sided tail probability of the observed
statistic under the zero-mean normal law restricted to that set.

All Gaussian interval masses are computed in log space from one-sided
survival functions, so unions sitting far in a tail keep full relative
precision (the direct CDF difference would cancel catastrophically).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .conditioning import init_line, piece_at
from .graph import PwlGraph, forward
from .hypothesis import AnomalyRegion, build_eta, test_statistic
from .linalg import CovMatrix, pixels_of

LOG2 = math.log(2.0)
DEFAULT_DELTA_SCALE = 1e-4
DELTA_FLOOR = 1e-12
MAX_SWEEP_STEPS = 10**6


class SweepBudgetError(Exception):
    """The parametric sweep exceeded its step budget."""


class DegenerateMassWarning(UserWarning):
    """The truncation set carries no representable Gaussian mass."""


@dataclass(frozen=True)
class TruncationSet:
    """Ordered disjoint union of intervals on the line parameter axis."""

    intervals: np.ndarray  # (k, 2), each row l < u, sorted, pairwise disjoint

    def __post_init__(self):
        arr = np.atleast_2d(np.asarray(self.intervals, dtype=np.float64))
        if arr.size == 0:
            arr = arr.reshape(0, 2)
        if arr.shape[1] != 2:
            raise ValueError("intervals must be rows of (lower, upper)")
        if np.any(arr[:, 0] >= arr[:, 1]):
            raise ValueError("each interval needs lower < upper")
        if arr.shape[0] > 1 and np.any(arr[1:, 0] <= arr[:-1, 1]):
            raise ValueError("intervals must be sorted and pairwise disjoint")
        object.__setattr__(self, "intervals", arr)

    @classmethod
    def from_intervals(cls, pairs, merge_gap: float = 0.0) -> "TruncationSet":
        """Sort and merge raw (l, u) pairs; gaps up to merge_gap are bridged."""
        rows = [(float(l), float(u)) for l, u in pairs if u > l]
        if not rows:
            raise ValueError("truncation set needs at least one nonempty interval")
        rows.sort()
        merged = [list(rows[0])]
        for lo, up in rows[1:]:
            if lo <= merged[-1][1] + merge_gap:
                merged[-1][1] = max(merged[-1][1], up)
            else:
                merged.append([lo, up])
        return cls(np.asarray(merged))

    @property
    def count(self) -> int:
        return self.intervals.shape[0]

    def total_length(self) -> float:
        return float(np.sum(self.intervals[:, 1] - self.intervals[:, 0]))

    def contains(self, t: float, tol: float = 0.0) -> bool:
        return bool(
            np.any((self.intervals[:, 0] - tol <= t) & (t <= self.intervals[:, 1] + tol))
        )

    def intersect(self, lo: float, up: float) -> list[tuple[float, float]]:
        out = []
        for l, u in self.intervals:
            a, b = max(l, lo), min(u, up)
            if a < b:
                out.append((a, b))
        return out


# ---------------------------------------------------------------------------
# Gaussian mass in log space.
# ---------------------------------------------------------------------------


def _log1mexp(d: float) -> float:
    """log(1 - exp(d)) for d <= 0, stable at both ends."""
    if d >= 0.0:
        return -np.inf
    if d > -LOG2:
        return math.log(-math.expm1(d))
    return math.log1p(-math.exp(d))


def _log_mass_right(lo: float, up: float) -> float:
    """log P(lo <= N(0,1) <= up) for 0 <= lo < up via survival functions."""
    log_sl = float(log_ndtr(-lo))
    log_su = float(log_ndtr(-up)) if np.isfinite(up) else -np.inf
    return log_sl + _log1mexp(log_su - log_sl)


def log_gauss_mass(lo: float, up: float, sigma: float) -> float:
    """log P(lo <= N(0, sigma^2) <= up); -inf for an empty interval."""
    if not up > lo:
        return -np.inf
    ls = lo / sigma if np.isfinite(lo) else -np.inf
    us = up / sigma if np.isfinite(up) else np.inf
    if ls >= 0.0:
        return _log_mass_right(ls, us)
    if us <= 0.0:
        return _log_mass_right(-us, -ls)
    return float(np.logaddexp(_log_mass_right(0.0, -ls), _log_mass_right(0.0, us)))


def _log_mass_union(pairs, sigma: float) -> float:
    logs = [log_gauss_mass(l, u, sigma) for l, u in pairs]
    if not logs:
        return -np.inf
    return float(np.logaddexp.reduce(logs))


def tn_two_sided_p(T: float, variance: float, Z: TruncationSet,
                   null_offset: float = 0.0) -> float:
    """P(|t - c| >= |T - c|) for t ~ N(c, variance) truncated to the set Z.

    c is the hypothesized contrast value (0 for the plain mean-difference
    null). Requires T to lie in Z up to a small tolerance; the numerator is
    the mass of Z outside the symmetric band around c, the denominator the
    full mass of Z.
    """
    if variance <= 0.0:
        raise ValueError("variance must be positive")
    sigma = math.sqrt(variance)
    if not Z.contains(T, tol=1e-9 * (1.0 + sigma) + 1e-12 * abs(T)):
        raise ValueError(f"observed statistic {T} lies outside the truncation set")
    shifted = Z if null_offset == 0.0 else TruncationSet(Z.intervals - null_offset)
    a = abs(T - null_offset)
    log_den = _log_mass_union(shifted.intervals, sigma)
    if not np.isfinite(log_den):
        warnings.warn("truncation set mass underflowed; returning boundary p-value",
                      DegenerateMassWarning)
        return 1.0
    tail_pairs = shifted.intersect(-np.inf, -a) + shifted.intersect(a, np.inf)
    log_num = _log_mass_union(tail_pairs, sigma)
    if not np.isfinite(log_num):
        return 0.0
    return float(min(1.0, math.exp(min(0.0, log_num - log_den))))


def p_naive(T: float, variance: float, null_offset: float = 0.0) -> float:
    """Unconditional two-sided normal tail probability of the statistic."""
    if variance <= 0.0:
        raise ValueError("variance must be positive")
    return float(min(1.0, 2.0 * ndtr(-abs(T - null_offset) / math.sqrt(variance))))


def p_bonferroni(p_naive_value: float, n: int) -> float:
    """min(1, p_naive * 2^n) evaluated in log space to survive n up to 4096."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if p_naive_value <= 0.0:
        return 0.0
    log_p = math.log(p_naive_value) + n * LOG2
    return float(math.exp(min(0.0, log_p)))


# ---------------------------------------------------------------------------
# Parametric sweep along the line.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepDiagnostics:
    steps: int
    z_min: float
    z_max: float
    interval_count: int
    delta: float


def _sweep_impl(g: PwlGraph, x, cov: CovMatrix, eta: np.ndarray,
                delta: float | None = None, max_steps: int = MAX_SWEEP_STEPS):
    vec = pixels_of(x)
    _, region_obs = forward(g, vec)
    T, variance = test_statistic(eta, vec, cov)
    sigma = math.sqrt(variance)
    if delta is None:
        delta = max(DEFAULT_DELTA_SCALE * sigma, DELTA_FLOOR)
    z_min = -abs(T) - 10.0 * sigma
    z_max = abs(T) + 10.0 * sigma
    line = init_line(vec, eta, cov)

    collected: list[tuple[float, float]] = []
    z = z_min
    steps = 0
    while z <= z_max:
        steps += 1
        if steps > max_steps:
            raise SweepBudgetError(
                f"sweep exceeded {max_steps} steps at z = {z} "
                f"(range [{z_min}, {z_max}], delta = {delta})"
            )
        piece = piece_at(g, line, z)
        if piece.region == region_obs:
            collected.append((piece.L, piece.U))
        if not np.isfinite(piece.U):
            break
        z = piece.U + delta

    # The piece holding the observed statistic always belongs to the set.
    own = piece_at(g, line, T)
    collected.append((own.L, own.U))
    zset = TruncationSet.from_intervals(collected, merge_gap=delta)
    diag = SweepDiagnostics(steps=steps, z_min=z_min, z_max=z_max,
                            interval_count=zset.count, delta=delta)
    return zset, diag, T, variance, region_obs


def sweep(g: PwlGraph, x, cov: CovMatrix, eta: np.ndarray,
          delta: float | None = None, max_steps: int = MAX_SWEEP_STEPS) -> TruncationSet:
    """Union of line intervals whose assigned region matches the observed one."""
    zset, _, _, _, _ = _sweep_impl(g, x, cov, eta, delta, max_steps)
    return zset


def p_over_conditioning(g: PwlGraph, x, cov: CovMatrix, eta: np.ndarray,
                        null_offset: float = 0.0) -> float:
    """p-value conditioning on the single piece containing the observation."""
    vec = pixels_of(x)
    T, variance = test_statistic(eta, vec, cov)
    line = init_line(vec, eta, cov)
    piece = piece_at(g, line, T)
    lone = TruncationSet.from_intervals([(piece.L, piece.U)])
    return tn_two_sided_p(T, variance, lone, null_offset)


# ---------------------------------------------------------------------------
# End-to-end test.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestOutcome:
    """Region, statistic, truncation set, and the four p-values of one test."""

    region: AnomalyRegion
    undefined: bool
    observed_stat: float | None = None
    variance: float | None = None
    truncation: TruncationSet | None = None
    p_selective: float | None = None
    p_naive: float | None = None
    p_bonferroni: float | None = None
    p_over_conditioning: float | None = None
    diagnostics: SweepDiagnostics | None = None

    def to_dict(self) -> dict:
        out = {
            "n": self.region.n,
            "region_size": self.region.size,
            "region_indices": self.region.indices.tolist(),
            "undefined_hypothesis": self.undefined,
        }
        if not self.undefined:
            out.update(
                observed_stat=self.observed_stat,
                variance=self.variance,
                p_selective=self.p_selective,
                p_naive=self.p_naive,
                p_bonferroni=self.p_bonferroni,
                p_over_conditioning=self.p_over_conditioning,
                interval_count=self.diagnostics.interval_count,
                sweep_steps=self.diagnostics.steps,
                z_min=self.diagnostics.z_min,
                z_max=self.diagnostics.z_max,
            )
        return out


def run_test(g: PwlGraph, x, cov: CovMatrix, delta: float | None = None,
             null_offset: float = 0.0) -> TestOutcome:
    """Detect, then test: all four p-values for the detected anomaly region.

    An empty or full detected region has no complement to contrast against;
    the outcome is flagged undefined and carries no p-values. null_offset is
    the hypothesized contrast value c (0 for the mean-difference null).
    """
    vec = pixels_of(x)
    _, region = forward(g, vec)
    if not region.is_testable:
        return TestOutcome(region=region, undefined=True)
    eta = build_eta(region)
    zset, diag, T, variance, _ = _sweep_impl(g, vec, cov, eta, delta)
    p_sel = tn_two_sided_p(T, variance, zset, null_offset)
    p_nv = p_naive(T, variance, null_offset)
    return TestOutcome(
        region=region,
        undefined=False,
        observed_stat=T,
        variance=variance,
        truncation=zset,
        p_selective=p_sel,
        p_naive=p_nv,
        p_bonferroni=p_bonferroni(p_nv, region.n),
        p_over_conditioning=p_over_conditioning(g, vec, cov, eta, null_offset),
        diagnostics=diag,
    )
