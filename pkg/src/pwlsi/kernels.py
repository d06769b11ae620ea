"""Hot kernels for line propagation: numba-jitted with a pure-numpy twin.

The parametric sweep queries the graph at thousands of line parameters per
test, so the per-node piece rules and the fused whole-graph interpreter are
the runtime hot spots. Set ``PWLSI_NUMBA=0`` to force the vectorized numpy
path (also the automatic fallback when numba is missing); both paths share
one set of conventions and are cross-checked in the test suite:

- a piece boundary hit exactly takes the closed side of the inequality
  (relu/abs active at v = 0, threshold in-region at v = lam);
- maxpool ties go to the first index in the window;
- bounds come from the running intersection of all hinge constraints.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("PWLSI_NUMBA", "1") != "0"

# Opcodes of the lowered graph program shared by both interpreters.
OP_AFFINE = 0
OP_RELU = 1
OP_ABS = 2
OP_MAXPOOL = 3
OP_CONCAT = 4
OP_THRESHOLD = 5


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy piece rules (vectorized); these are the fallback and the reference.
# ---------------------------------------------------------------------------

def _hinge_bounds_np(shifted_a, b, active):
    """Interval bounds from per-coordinate constraints sign(v) fixed.

    Each coordinate contributes the hinge t = -shifted_a/b where its affine
    value crosses the switch point; whether t bounds from below or above
    depends on the current side and the direction of travel.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -shifted_a / b
    moving = b != 0.0
    lower_mask = moving & (active == (b > 0.0))
    upper_mask = moving & (active == (b < 0.0))
    lo = float(t[lower_mask].max()) if lower_mask.any() else -np.inf
    up = float(t[upper_mask].min()) if upper_mask.any() else np.inf
    return lo, up


def relu_rule_np(a, b, z):
    v = a + b * z
    active = v >= 0.0
    lo, up = _hinge_bounds_np(a, b, active)
    return np.where(active, a, 0.0), np.where(active, b, 0.0), lo, up


def abs_rule_np(a, b, z):
    v = a + b * z
    active = v >= 0.0
    lo, up = _hinge_bounds_np(a, b, active)
    sign = np.where(active, 1.0, -1.0)
    return sign * a, sign * b, lo, up


def maxpool_rule_np(a, b, z, windows):
    va = a[windows]
    vb = b[windows]
    v = va + vb * z
    j = np.argmax(v, axis=1)  # first max wins ties
    rows = np.arange(windows.shape[0])
    a_out = va[rows, j]
    b_out = vb[rows, j]
    da = a_out[:, None] - va
    db = b_out[:, None] - vb
    # Winner stays on top while da + db*z >= 0 for every rival in the window.
    lo, up = _hinge_bounds_np(da.ravel(), db.ravel(), np.ones(da.size, dtype=bool))
    return a_out, b_out, lo, up


def threshold_rule_np(a, b, z, lam):
    v = a + b * z
    in_region = v >= lam
    lo, up = _hinge_bounds_np(a - lam, b, in_region)
    return in_region, lo, up


# ---------------------------------------------------------------------------
# numpy program interpreter (fallback path of piece_at).
# ---------------------------------------------------------------------------

def run_program_np(prog, a0, b0, z):
    """Run the lowered program with numpy ops; see conditioning.lower_graph."""
    abuf = np.zeros(prog.total)
    bbuf = np.zeros(prog.total)
    abuf[: a0.size] = a0
    bbuf[: b0.size] = b0
    lo, up = -np.inf, np.inf
    region = np.zeros(0, dtype=bool)
    offs = prog.slot_offs
    for row in prog.ops:
        code, i1, i2, out, aux, _ = row
        s1, e1 = offs[i1], offs[i1 + 1]
        so, eo = offs[out], offs[out + 1]
        if code == OP_AFFINE:
            w = prog.mats[aux]
            abuf[so:eo] = w @ abuf[s1:e1] + prog.biases[aux]
            bbuf[so:eo] = w @ bbuf[s1:e1]
        elif code == OP_RELU:
            a2, b2, l2, u2 = relu_rule_np(abuf[s1:e1], bbuf[s1:e1], z)
            abuf[so:eo], bbuf[so:eo] = a2, b2
            lo, up = max(lo, l2), min(up, u2)
        elif code == OP_ABS:
            a2, b2, l2, u2 = abs_rule_np(abuf[s1:e1], bbuf[s1:e1], z)
            abuf[so:eo], bbuf[so:eo] = a2, b2
            lo, up = max(lo, l2), min(up, u2)
        elif code == OP_MAXPOOL:
            a2, b2, l2, u2 = maxpool_rule_np(abuf[s1:e1], bbuf[s1:e1], z, prog.windows[aux])
            abuf[so:eo], bbuf[so:eo] = a2, b2
            lo, up = max(lo, l2), min(up, u2)
        elif code == OP_CONCAT:
            s2, e2 = offs[i2], offs[i2 + 1]
            abuf[so : so + (e1 - s1)] = abuf[s1:e1]
            bbuf[so : so + (e1 - s1)] = bbuf[s1:e1]
            abuf[so + (e1 - s1) : eo] = abuf[s2:e2]
            bbuf[so + (e1 - s1) : eo] = bbuf[s2:e2]
        else:  # OP_THRESHOLD
            region, l2, u2 = threshold_rule_np(abuf[s1:e1], bbuf[s1:e1], z, prog.lam)
            lo, up = max(lo, l2), min(up, u2)
    return abuf, bbuf, region, lo, up


# ---------------------------------------------------------------------------
# numba program interpreter (hot path): one nopython call per line query.
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @numba.njit(cache=True)
    def run_program_nb(ops, mat_data, mat_offs, mat_rows, mat_cols, bias_data,
                       bias_offs, win_data, win_offs, win_cols, slot_offs, total,
                       lam, a0, b0, z):
        abuf = np.zeros(total)
        bbuf = np.zeros(total)
        for i in range(a0.size):
            abuf[i] = a0[i]
            bbuf[i] = b0[i]
        lo = -np.inf
        up = np.inf
        region = np.zeros(1, dtype=np.bool_)
        for r in range(ops.shape[0]):
            code = ops[r, 0]
            i1 = ops[r, 1]
            i2 = ops[r, 2]
            out = ops[r, 3]
            aux = ops[r, 4]
            s1 = slot_offs[i1]
            e1 = slot_offs[i1 + 1]
            so = slot_offs[out]
            if code == OP_AFFINE:
                mo = mat_offs[aux]
                rows = mat_rows[aux]
                cols = mat_cols[aux]
                w = mat_data[mo : mo + rows * cols].reshape(rows, cols)
                av = np.dot(w, abuf[s1:e1])
                bv = np.dot(w, bbuf[s1:e1])
                bo = bias_offs[aux]
                for i in range(rows):
                    abuf[so + i] = av[i] + bias_data[bo + i]
                    bbuf[so + i] = bv[i]
            elif code == OP_RELU or code == OP_ABS:
                for i in range(e1 - s1):
                    ai = abuf[s1 + i]
                    bi = bbuf[s1 + i]
                    active = ai + bi * z >= 0.0
                    if bi != 0.0:
                        t = -ai / bi
                        if active == (bi > 0.0):
                            if t > lo:
                                lo = t
                        else:
                            if t < up:
                                up = t
                    if active:
                        abuf[so + i] = ai
                        bbuf[so + i] = bi
                    elif code == OP_ABS:
                        abuf[so + i] = -ai
                        bbuf[so + i] = -bi
                    else:
                        abuf[so + i] = 0.0
                        bbuf[so + i] = 0.0
            elif code == OP_MAXPOOL:
                wo = win_offs[aux]
                wc = win_cols[aux]
                n_out = (win_offs[aux + 1] - wo) // wc
                for row_i in range(n_out):
                    best = 0
                    best_v = -np.inf
                    for c in range(wc):
                        idx = win_data[wo + row_i * wc + c]
                        v = abuf[s1 + idx] + bbuf[s1 + idx] * z
                        if v > best_v:
                            best_v = v
                            best = idx
                    aw = abuf[s1 + best]
                    bw = bbuf[s1 + best]
                    abuf[so + row_i] = aw
                    bbuf[so + row_i] = bw
                    for c in range(wc):
                        idx = win_data[wo + row_i * wc + c]
                        if idx == best:
                            continue
                        da = aw - abuf[s1 + idx]
                        db = bw - bbuf[s1 + idx]
                        if db > 0.0:
                            t = -da / db
                            if t > lo:
                                lo = t
                        elif db < 0.0:
                            t = -da / db
                            if t < up:
                                up = t
            elif code == OP_CONCAT:
                s2 = slot_offs[i2]
                e2 = slot_offs[i2 + 1]
                for i in range(e1 - s1):
                    abuf[so + i] = abuf[s1 + i]
                    bbuf[so + i] = bbuf[s1 + i]
                base = so + (e1 - s1)
                for i in range(e2 - s2):
                    abuf[base + i] = abuf[s2 + i]
                    bbuf[base + i] = bbuf[s2 + i]
            else:  # OP_THRESHOLD
                region = np.zeros(e1 - s1, dtype=np.bool_)
                for i in range(e1 - s1):
                    ai = abuf[s1 + i]
                    bi = bbuf[s1 + i]
                    inside = ai + bi * z >= lam
                    region[i] = inside
                    if bi != 0.0:
                        t = (lam - ai) / bi
                        if inside == (bi > 0.0):
                            if t > lo:
                                lo = t
                        else:
                            if t < up:
                                up = t
        return abuf, bbuf, region, lo, up

else:  # pragma: no cover
    run_program_nb = None
