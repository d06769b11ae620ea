"""Monte Carlo experiment drivers: type-I error, power, robustness.

Trials are independent with per-trial seeds (base seed + trial index), so a
run is reproducible and may be spread over a process pool; results are
gathered in trial order regardless of completion order. Trials whose
detected region is empty or full are excluded from the rejection-rate
denominator and reported in the ``undefined`` column.
"""

from __future__ import annotations

import concurrent.futures
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import noise as noise_mod
from .graph import PwlGraph, assemble_detector
from .hypothesis import make_synthetic
from .inference import SweepBudgetError, run_test
from .linalg import CovMatrix, Image, ar1_kron_cov, infer_shape

METHODS = ("selective", "naive", "bonf", "oc")
_P_ATTR = {"selective": "p_selective", "naive": "p_naive",
           "bonf": "p_bonferroni", "oc": "p_over_conditioning"}

CSV_HEADER = "method,setting,n,delta,cov,alpha,trials,undefined,rejections,rate,ci_lo,ci_hi"


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = "type1"  # type1 | power | robustness | single-test
    n: int = 64
    trials: int = 1000
    deltas: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0)
    cov_kind: str = "indep"  # indep | ar
    alpha: float = 0.05
    lam: float = 1.2
    filter_window: int = 1
    seed: int = 0
    region_size: int = 16
    w1_targets: tuple[float, ...] = (0.01, 0.02, 0.03, 0.04)
    families: tuple[str, ...] = noise_mod.FAMILIES
    workers: int = 1
    large: bool = False

    def __post_init__(self):
        if self.kind not in ("type1", "power", "robustness", "single-test"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.lam <= 0.0:
            raise ValueError("lam must be positive")
        if self.cov_kind not in ("indep", "ar"):
            raise ValueError(f"unknown covariance kind {self.cov_kind!r}")
        if self.n > 256 and not self.large:
            raise ValueError(f"n = {self.n} requires the large flag")


@dataclass(frozen=True)
class ResultRow:
    method: str
    setting: str
    n: int
    delta: float
    cov: str
    alpha: float
    trials: int
    undefined: int
    rejections: int
    rate: float
    ci_lo: float
    ci_hi: float


@dataclass
class TrialRecord:
    index: int
    undefined: bool
    p_values: dict = field(default_factory=dict)
    error: str | None = None


def make_cov(cov_kind: str, n: int) -> CovMatrix:
    if cov_kind == "indep":
        return CovMatrix.identity(n)
    side = int(round(math.sqrt(n)))
    if side * side != n:
        raise ValueError(f"n = {n} is not a perfect square; the AR kernel needs one")
    return ar1_kron_cov(side, 0.25)


def binomial_ci(successes: int, total: int) -> tuple[float, float]:
    """Normal-approximation 95% interval around the empirical rate."""
    if total == 0:
        return 0.0, 1.0
    rate = successes / total
    half = 1.959963984540054 * math.sqrt(max(rate * (1.0 - rate), 0.0) / total)
    return max(0.0, rate - half), min(1.0, rate + half)


# ---------------------------------------------------------------------------
# Trial execution. Worker processes reconstruct their context exactly once.
# ---------------------------------------------------------------------------

_CTX: dict = {}


def _init_worker(graph, cov, family, region_size):
    _CTX["graph"] = graph
    _CTX["cov"] = cov
    _CTX["family"] = family
    _CTX["region_size"] = region_size


def _one_trial(args) -> TrialRecord:
    idx, seed, delta = args
    graph: PwlGraph = _CTX["graph"]
    cov: CovMatrix = _CTX["cov"]
    family = _CTX["family"]
    if family is None:
        x, _ = make_synthetic(graph.n, delta, _CTX["region_size"], cov, seed)
    else:
        x = Image(noise_mod.sample(family, graph.n, seed), infer_shape(graph.n))
    try:
        outcome = run_test(graph, x, cov)
    except SweepBudgetError as exc:
        return TrialRecord(index=idx, undefined=False, error=str(exc))
    if outcome.undefined:
        return TrialRecord(index=idx, undefined=True)
    return TrialRecord(
        index=idx,
        undefined=False,
        p_values={m: getattr(outcome, _P_ATTR[m]) for m in METHODS},
    )


def run_trials(graph, cov, trials, seed, delta=0.0, family=None, region_size=16,
               workers=1) -> list[TrialRecord]:
    args = [(i, seed + i, delta) for i in range(trials)]
    if workers <= 1:
        _init_worker(graph, cov, family, region_size)
        records = [_one_trial(a) for a in args]
    else:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=workers,
            initializer=_init_worker,
            initargs=(graph, cov, family, region_size),
        ) as pool:
            records = list(pool.map(_one_trial, args, chunksize=16))
    records.sort(key=lambda r: r.index)
    return records


def aggregate(records, setting, n, delta, cov_kind, alpha) -> list[ResultRow]:
    total = len(records)
    undefined = sum(1 for r in records if r.undefined or r.error is not None)
    defined = [r for r in records if not r.undefined and r.error is None]
    rows = []
    for method in METHODS:
        rejections = sum(1 for r in defined if r.p_values[method] <= alpha)
        denom = len(defined)
        rate = rejections / denom if denom else float("nan")
        lo, hi = binomial_ci(rejections, denom)
        rows.append(ResultRow(method, setting, n, delta, cov_kind, alpha, total,
                              undefined, rejections, rate, lo, hi))
    return rows


# ---------------------------------------------------------------------------
# Experiment kinds.
# ---------------------------------------------------------------------------


def run_experiment(spec: ExperimentSpec, model) -> tuple[list[ResultRow], dict]:
    """Run one experiment; returns CSV rows plus per-setting trial records."""
    if model.n != spec.n:
        raise ValueError(f"weights are for n = {model.n}, experiment asks n = {spec.n}")
    graph = assemble_detector(model, spec.lam, spec.filter_window)
    rows: list[ResultRow] = []
    details: dict[str, list[TrialRecord]] = {}

    if spec.kind in ("type1", "single-test"):
        trials = 1 if spec.kind == "single-test" else spec.trials
        delta = spec.deltas[0] if spec.kind == "single-test" and spec.deltas else 0.0
        cov = make_cov(spec.cov_kind, spec.n)
        records = run_trials(graph, cov, trials, spec.seed, delta=delta,
                             region_size=spec.region_size, workers=spec.workers)
        name = spec.kind
        rows += aggregate(records, name, spec.n, delta, spec.cov_kind, spec.alpha)
        details[name] = records
    elif spec.kind == "power":
        cov = make_cov(spec.cov_kind, spec.n)
        for delta in spec.deltas:
            records = run_trials(graph, cov, spec.trials, spec.seed, delta=delta,
                                 region_size=spec.region_size, workers=spec.workers)
            name = f"power-d{delta:g}"
            rows += aggregate(records, name, spec.n, delta, spec.cov_kind, spec.alpha)
            details[name] = records
    else:  # robustness: i.i.d. standardized noise per pixel, identity test cov
        cov = CovMatrix.identity(spec.n)
        for family in spec.families:
            for target in spec.w1_targets:
                fam = noise_mod.calibrate(family, target)
                records = run_trials(graph, cov, spec.trials, spec.seed, family=fam,
                                     workers=spec.workers)
                name = f"robust-{family}-w{target:g}"
                rows += aggregate(records, name, spec.n, 0.0, "indep", spec.alpha)
                details[name] = records
    return rows, details


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for r in rows:
        buf.write(
            f"{r.method},{r.setting},{r.n},{r.delta:g},{r.cov},{r.alpha:g},"
            f"{r.trials},{r.undefined},{r.rejections},{r.rate:.6f},"
            f"{r.ci_lo:.6f},{r.ci_hi:.6f}\n"
        )
    return buf.getvalue()


def selective_p_values(records) -> np.ndarray:
    """Selective p-values of the defined trials, in trial order."""
    return np.array([r.p_values["selective"] for r in records
                     if not r.undefined and r.error is None])
