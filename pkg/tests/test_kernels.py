import os
import subprocess
import sys

import numpy as np
import pytest

from pwlsi import kernels


def brute_piece_bounds(values_a, values_b, z, switch):
    """Per-coordinate oracle: solve each hinge crossing by hand."""
    lo, up = -np.inf, np.inf
    for a, b in zip(values_a, values_b):
        v = a + b * z
        active = v >= switch
        if b == 0.0:
            continue
        t = (switch - a) / b
        if active == (b > 0.0):
            lo = max(lo, t)
        else:
            up = min(up, t)
    return lo, up


class TestPieceRules:
    def test_relu_rule_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = rng.standard_normal(8)
            b = rng.standard_normal(8)
            z = float(rng.uniform(-2, 2))
            a2, b2, lo, up = kernels.relu_rule_np(a, b, z)
            ref_lo, ref_up = brute_piece_bounds(a, b, z, 0.0)
            assert lo == pytest.approx(ref_lo) and up == pytest.approx(ref_up)
            v = a + b * z
            np.testing.assert_array_equal(a2, np.where(v >= 0, a, 0.0))
            np.testing.assert_array_equal(b2, np.where(v >= 0, b, 0.0))
            assert lo <= z <= up

    def test_abs_rule_sign_flip(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal(6)
        b = rng.standard_normal(6)
        z = 0.4
        a2, b2, lo, up = kernels.abs_rule_np(a, b, z)
        v = a + b * z
        np.testing.assert_allclose(a2 + b2 * z, np.abs(v))
        assert lo <= z <= up

    def test_threshold_rule(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = rng.standard_normal(5)
            b = rng.standard_normal(5)
            z = float(rng.uniform(-1, 1))
            lam = 0.8
            mask, lo, up = kernels.threshold_rule_np(a, b, z, lam)
            np.testing.assert_array_equal(mask, (a + b * z) >= lam)
            ref_lo, ref_up = brute_piece_bounds(a, b, z, lam)
            assert lo == pytest.approx(ref_lo) and up == pytest.approx(ref_up)

    def test_maxpool_rule_first_index_tie(self):
        windows = np.array([[0, 1]])
        a = np.array([1.0, 1.0])
        b = np.array([0.5, 0.5])
        a2, b2, _, _ = kernels.maxpool_rule_np(a, b, 0.0, windows)
        # identical cells: the first wins and no hinge is produced
        assert a2[0] == 1.0 and b2[0] == 0.5

    def test_maxpool_rule_bounds(self):
        windows = np.array([[0, 1, 2]])
        a = np.array([0.0, 1.0, -2.0])
        b = np.array([1.0, 0.0, 0.0])
        # at z=2 cell 0 (value 2) beats cell 1 (1) and cell 2 (-2); it loses
        # to cell 1 below z=1
        a2, b2, lo, up = kernels.maxpool_rule_np(a, b, 2.0, windows)
        assert (a2[0], b2[0]) == (0.0, 1.0)
        assert lo == pytest.approx(1.0)
        assert up == np.inf


@pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")
def test_numpy_fallback_env_flag():
    code = (
        "import pwlsi.kernels as k; import sys; "
        "sys.exit(0 if k.backend_name() == 'numpy' and k.USE_NUMBA is False else 1)"
    )
    env = dict(os.environ, PWLSI_NUMBA="0")
    proc = subprocess.run([sys.executable, "-c", code], env=env)
    assert proc.returncode == 0


def test_numpy_fallback_full_pipeline():
    # the whole selective test runs identically on the fallback path
    code = """
import numpy as np
from pwlsi import CovMatrix, VaeModel, assemble_detector, run_test, sample_gaussian, train
from pwlsi.vae import TrainConfig
import pwlsi.kernels as k
assert k.backend_name() == "numpy"
model = train(VaeModel.init(16, m=3, seed=11),
              np.random.default_rng(12).standard_normal((400, 16)),
              TrainConfig(epochs=40, batch_size=64, seed=13))
g = assemble_detector(model, 1.2, 1)
cov = CovMatrix.identity(16)
x = sample_gaussian(np.zeros(16), cov, seed=77)
out = run_test(g, x, cov)
print(repr((out.undefined, out.p_selective, out.p_naive, out.p_over_conditioning)))
"""
    env_np = dict(os.environ, PWLSI_NUMBA="0")
    run_np = subprocess.run([sys.executable, "-c", code], env=env_np,
                            capture_output=True, text=True)
    assert run_np.returncode == 0, run_np.stderr
    code_nb = code.replace('assert k.backend_name() == "numpy"',
                           'assert k.backend_name() == "numba"')
    env_nb = dict(os.environ, PWLSI_NUMBA="1")
    run_nb = subprocess.run([sys.executable, "-c", code_nb], env=env_nb,
                            capture_output=True, text=True)
    assert run_nb.returncode == 0, run_nb.stderr
    np_vals = eval(run_np.stdout.strip())
    nb_vals = eval(run_nb.stdout.strip())
    assert np_vals[0] == nb_vals[0]
    np.testing.assert_allclose(np_vals[1:], nb_vals[1:], rtol=0, atol=1e-12)
