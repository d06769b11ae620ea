"""Benchmark the line-propagation hot path: numba kernels vs numpy fallback.

Usage: python benchmarks/bench_conditioning.py [--trials 200]

Times piece queries and whole selective tests on trained models at n = 64
and n = 256, running each workload through both interpreters.
"""

import argparse
import time

import numpy as np

from pwlsi import (CovMatrix, VaeModel, assemble_detector, build_eta, forward,
                   init_line, run_test, sample_gaussian, train)
from pwlsi import kernels
from pwlsi.conditioning import lower_graph
from pwlsi.vae import TrainConfig


def time_piece_queries(graph, line, zs, backend):
    prog = lower_graph(graph)
    if backend == "numba":
        runner = lambda z: kernels.run_program_nb(
            prog.ops, prog.mat_data, prog.mat_offs, prog.mat_rows, prog.mat_cols,
            prog.bias_data, prog.bias_offs, prog.win_data, prog.win_offs,
            prog.win_cols, prog.slot_offs, prog.total, prog.lam, line.a, line.b, z,
        )
    else:
        runner = lambda z: kernels.run_program_np(prog, line.a, line.b, z)
    runner(float(zs[0]))  # warm (JIT compile / caches)
    start = time.perf_counter()
    for z in zs:
        runner(float(z))
    return (time.perf_counter() - start) / zs.size


def bench_model(n, epochs, trials):
    model = train(
        VaeModel.init(n, m=10, seed=0),
        np.random.default_rng(1).standard_normal((500, n)),
        TrainConfig(epochs=epochs, seed=2),
    )
    graph = assemble_detector(model, 1.2, 1)
    cov = CovMatrix.identity(n)
    x = sample_gaussian(np.zeros(n), cov, seed=3).pixels
    _, region = forward(graph, x)
    eta = build_eta(region)
    line = init_line(x, eta, cov)
    zs = np.random.default_rng(4).uniform(-3, 3, size=trials)

    results = {}
    for backend in ("numba", "numpy") if kernels.HAS_NUMBA else ("numpy",):
        results[backend] = time_piece_queries(graph, line, zs, backend)
    print(f"n={n:4d}  piece query: ", end="")
    for backend, dt in results.items():
        print(f"{backend} {dt * 1e6:8.1f} us   ", end="")
    if len(results) == 2:
        print(f"speedup {results['numpy'] / results['numba']:.1f}x", end="")
    print()
    return graph, cov


def bench_full_test(graph, cov, n, repeats=5):
    xs = [sample_gaussian(np.zeros(n), cov, seed=10 + i) for i in range(repeats)]
    run_test(graph, xs[0], cov)  # warm
    start = time.perf_counter()
    done = 0
    for x in xs:
        out = run_test(graph, x, cov)
        done += 0 if out.undefined else 1
    dt = (time.perf_counter() - start) / repeats
    print(f"n={n:4d}  full selective test ({kernels.backend_name()} backend): "
          f"{dt * 1e3:7.1f} ms/test  ({done}/{repeats} testable)")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--trials", type=int, default=200)
    args = parser.parse_args()
    print(f"active backend: {kernels.backend_name()}  (set PWLSI_NUMBA=0 to force numpy)")
    for n, epochs in ((64, 40), (256, 40)):
        graph, cov = bench_model(n, epochs, args.trials)
        bench_full_test(graph, cov, n)


if __name__ == "__main__":
    main()
