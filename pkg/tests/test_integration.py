"""Cross-module runs over configurations the acceptance grid leaves out:
the mean-filtered detector under correlated noise, and the conv variant
driven through the full selective test."""

import numpy as np
from scipy import stats

from pwlsi import (assemble_detector, build_eta, forward, init_line, run_test,
                   sample_gaussian)
from pwlsi.experiments import make_cov, run_trials, selective_p_values
from pwlsi.graph import forward_errors
from pwlsi.inference import _sweep_impl

from conftest import train_quick


def test_filtered_detector_under_correlation_is_calibrated(mlp64):
    graph = assemble_detector(mlp64, lam=1.2, filter_window=3)
    cov = make_cov("ar", 64)
    records = run_trials(graph, cov, 600, seed=424242, delta=0.0)
    ps = selective_p_values(records)
    assert ps.size >= 300  # filtering empties some null regions
    ks = stats.kstest(ps, "uniform").statistic
    # generous bound: a systematic interval bug inflates KS far beyond this
    assert ks < 0.09, f"KS {ks} over {ps.size} defined trials"


def test_filtered_graph_grid_soundness_under_correlation(mlp64):
    graph = assemble_detector(mlp64, lam=1.2, filter_window=3)
    cov = make_cov("ar", 64)
    checked = 0
    seed = 0
    while checked < 3:
        seed += 1
        x = sample_gaussian(np.zeros(64), cov, seed=818000 + seed).pixels
        _, region = forward(graph, x)
        if not region.is_testable:
            continue
        checked += 1
        eta = build_eta(region)
        zset, diag, _, _, _ = _sweep_impl(graph, x, cov, eta)
        line = init_line(x, eta, cov)
        zs = np.linspace(diag.z_min, diag.z_max, 25_000)
        errors = forward_errors(graph, line.a[:, None] + line.b[:, None] * zs[None, :])
        agree = ((errors >= graph.lam) == region.mask[:, None]).all(axis=0)
        in_set = np.zeros(zs.size, bool)
        for lo, up in zset.intervals:
            in_set |= (zs >= lo) & (zs <= up)
        assert (agree == in_set).mean() >= 0.999


def test_conv_model_full_selective_test():
    model = train_quick(16, 3, epochs=30, seed=23, conv=True)
    graph = assemble_detector(model, lam=1.2, filter_window=1)
    cov = make_cov("indep", 16)
    done = 0
    for seed in range(12):
        x = sample_gaussian(np.zeros(16), cov, seed=909000 + seed)
        out = run_test(graph, x, cov)
        if out.undefined:
            continue
        done += 1
        assert 0.0 < out.p_selective <= 1.0
        assert out.truncation.contains(out.observed_stat, tol=1e-12)
        again = run_test(graph, x, cov)
        assert again.p_selective == out.p_selective
    assert done >= 3
