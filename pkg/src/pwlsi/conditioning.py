"""Affine-line propagation through a graph: pieces, intervals, regions.

A line ``{a + b z}`` is pushed through every node in topological order. Each
linear node maps (a, b) through its matrix; each piecewise node selects the
piece containing the current z, maps (a, b) through that piece, and shrinks
the running interval to where the selection stays put. The terminal
threshold node yields the anomaly region assigned on that interval.

The graph is lowered once to a flat opcode program executed by twin
interpreters (numba-jitted hot path, vectorized numpy fallback; selection in
:mod:`pwlsi.kernels`). The per-node rules are also exposed directly as
propagate_linear / propagate_concat, with a node-walk reference used to
cross-check the interpreters in the test suite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .graph import LINEAR_KINDS, GraphError, PwlGraph, PwlNode
from .hypothesis import AnomalyRegion
from .linalg import CovMatrix, pixels_of

DEGENERATE_WIDTH = 1e-12


class DegeneratePieceWarning(UserWarning):
    """A propagated interval collapsed below the degenerate width."""


@dataclass
class AffineLine:
    """The line segment {a + b z : z in [L, U]} carried through the graph."""

    a: np.ndarray
    b: np.ndarray
    L: float = -np.inf
    U: float = np.inf

    def __post_init__(self):
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.a.shape != self.b.shape or self.a.ndim != 1:
            raise ValueError("point and direction must be 1-d vectors of equal length")
        if not self.L < self.U:
            raise ValueError(f"empty interval [{self.L}, {self.U}]")

    def value_at(self, z: float) -> np.ndarray:
        return self.a + self.b * z


@dataclass(frozen=True)
class PieceResult:
    """One piece of the line: its interval, assigned region, and error line."""

    L: float
    U: float
    region: AnomalyRegion
    error_line: AffineLine = field(repr=False)

    @property
    def interval(self) -> tuple[float, float]:
        return (self.L, self.U)


def init_line(x, eta: np.ndarray, cov: CovMatrix) -> AffineLine:
    """Line through the observed image along the covariance-scaled contrast.

    The point component is the part of x orthogonal (in the eta sense) to the
    statistic, so a + b * (eta^T x) reproduces x exactly.
    """
    x = pixels_of(x)
    eta = np.asarray(eta, dtype=np.float64)
    if not np.any(eta != 0.0):
        raise ValueError("contrast vector is identically zero")
    if x.shape[0] != eta.shape[0] or x.shape[0] != cov.n:
        raise ValueError("dimension mismatch between image, contrast, and covariance")
    sig_eta = cov.matvec(eta)
    variance = float(eta @ sig_eta)
    if variance <= 0.0:
        raise ValueError(f"contrast variance must be positive, got {variance}")
    b = sig_eta / variance
    a = x - b * float(eta @ x)
    return AffineLine(a=a, b=b)


def propagate_linear(node: PwlNode, line: AffineLine, z: float) -> AffineLine:
    """Push a line through one non-concat, non-threshold node at parameter z."""
    if node.kind in ("concat", "threshold"):
        raise GraphError(f"propagate_linear does not handle {node.kind} nodes")
    if node.in_dim != line.a.size:
        raise GraphError(f"{node.kind} node expects dim {node.in_dim}, line has {line.a.size}")
    if node.kind in LINEAR_KINDS:
        a = node.weight @ line.a
        if node.bias is not None:
            a = a + node.bias
        return AffineLine(a, node.weight @ line.b, line.L, line.U)
    if node.kind == "relu":
        a, b, lo, up = kernels.relu_rule_np(line.a, line.b, z)
    elif node.kind == "abs":
        a, b, lo, up = kernels.abs_rule_np(line.a, line.b, z)
    else:  # maxpool
        a, b, lo, up = kernels.maxpool_rule_np(line.a, line.b, z, node.windows)
    lo, up = max(line.L, lo), min(line.U, up)
    if lo > up:
        raise GraphError(
            f"internal inconsistency: piece interval [{lo}, {up}] is empty at z = {z}"
        )
    return AffineLine(a, b, lo, up) if lo < up else _degenerate_line(a, b, lo, up)


def _degenerate_line(a, b, lo, up):
    # L == U cannot satisfy the AffineLine invariant; widen by one ulp so the
    # degenerate piece can still be reported and stepped over by the sweep.
    eps = np.spacing(abs(lo) + 1.0)
    return AffineLine(a, b, lo, up + eps)


def propagate_concat(left: AffineLine, right: AffineLine) -> AffineLine:
    """Stack two branch lines; the interval is the branch intersection."""
    lo = max(left.L, right.L)
    up = min(left.U, right.U)
    if lo > up:
        raise GraphError(f"internal inconsistency: concat intervals [{left.L},{left.U}] "
                         f"and [{right.L},{right.U}] are disjoint")
    a = np.concatenate([left.a, right.a])
    b = np.concatenate([left.b, right.b])
    return AffineLine(a, b, lo, up) if lo < up else _degenerate_line(a, b, lo, up)


def piece_at(g: PwlGraph, line: AffineLine, z: float) -> PieceResult:
    """Interval around z on which the graph's region assignment is constant."""
    if not (line.L < z < line.U):
        raise ValueError(f"z = {z} outside the open line interval ({line.L}, {line.U})")
    if line.a.size != g.n:
        raise GraphError(f"line has dimension {line.a.size}, graph expects {g.n}")
    prog = lower_graph(g)
    if kernels.USE_NUMBA:
        abuf, bbuf, mask, lo, up = kernels.run_program_nb(
            prog.ops, prog.mat_data, prog.mat_offs, prog.mat_rows, prog.mat_cols,
            prog.bias_data, prog.bias_offs, prog.win_data, prog.win_offs,
            prog.win_cols, prog.slot_offs, prog.total, prog.lam, line.a, line.b, z,
        )
    else:
        abuf, bbuf, mask, lo, up = kernels.run_program_np(prog, line.a, line.b, z)
    s = prog.slot_offs[prog.pre_slot]
    e = prog.slot_offs[prog.pre_slot + 1]
    err_a, err_b = abuf[s:e].copy(), bbuf[s:e].copy()
    lo, up = max(lo, line.L), min(up, line.U)
    if lo > up:
        raise GraphError(f"internal inconsistency: empty piece interval at z = {z}")
    if up - lo < DEGENERATE_WIDTH:
        warnings.warn(
            f"piece interval at z = {z} has width {up - lo:.3e}", DegeneratePieceWarning
        )
    err_line = AffineLine(err_a, err_b) if lo >= up else AffineLine(err_a, err_b, lo, up)
    return PieceResult(L=lo, U=up, region=AnomalyRegion(np.asarray(mask, dtype=bool)),
                       error_line=err_line)


def _piece_walk(g: PwlGraph, line: AffineLine, z: float):
    """Node-by-node reference walk; cross-checks the program interpreters."""
    lines: dict[int, AffineLine] = {-1: line}
    for i, node in enumerate(g.nodes[:-1]):
        if node.kind == "concat":
            lines[i] = propagate_concat(lines[node.inputs[0]], lines[node.inputs[1]])
        else:
            lines[i] = propagate_linear(node, lines[node.inputs[0]], z)
    sink = g.nodes[-1]
    pre = lines[sink.inputs[0]]
    mask, lo, up = kernels.threshold_rule_np(pre.a, pre.b, z, sink.lam)
    return pre.a, pre.b, mask, max(pre.L, lo), min(pre.U, up)


# ---------------------------------------------------------------------------
# Graph lowering: flatten the DAG into an opcode table for the interpreters.
# ---------------------------------------------------------------------------


@dataclass
class Program:
    ops: np.ndarray
    mats: list
    biases: list
    windows: list
    mat_data: np.ndarray
    mat_offs: np.ndarray
    mat_rows: np.ndarray
    mat_cols: np.ndarray
    bias_data: np.ndarray
    bias_offs: np.ndarray
    win_data: np.ndarray
    win_offs: np.ndarray
    win_cols: np.ndarray
    slot_offs: np.ndarray
    total: int
    pre_slot: int
    lam: float


_OPCODE = {"relu": kernels.OP_RELU, "abs": kernels.OP_ABS, "maxpool": kernels.OP_MAXPOOL,
           "concat": kernels.OP_CONCAT, "threshold": kernels.OP_THRESHOLD}


def lower_graph(g: PwlGraph) -> Program:
    """Lower the node DAG to a flat program; cached on the graph instance."""
    if g._program is not None:
        return g._program
    dims = [g.n] + [node.out_dim for node in g.nodes]
    slot_offs = np.zeros(len(dims) + 1, dtype=np.int64)
    np.cumsum(dims, out=slot_offs[1:])
    # slot k+1 holds node k's output; slot 0 is the source, referenced as -1.
    ops = []
    mats, biases, windows = [], [], []
    pre_slot = 0
    for i, node in enumerate(g.nodes):
        in1 = node.inputs[0] + 1
        in2 = node.inputs[1] + 1 if len(node.inputs) > 1 else 0
        out = i + 1
        if node.kind in LINEAR_KINDS:
            aux = len(mats)
            mats.append(np.ascontiguousarray(node.weight))
            biases.append(np.zeros(node.out_dim) if node.bias is None else node.bias)
            ops.append((kernels.OP_AFFINE, in1, in2, out, aux, node.out_dim))
        elif node.kind == "maxpool":
            aux = len(windows)
            windows.append(node.windows)
            ops.append((kernels.OP_MAXPOOL, in1, in2, out, aux, node.out_dim))
        elif node.kind == "threshold":
            pre_slot = in1
            ops.append((kernels.OP_THRESHOLD, in1, in2, out, 0, node.out_dim))
        else:
            ops.append((_OPCODE[node.kind], in1, in2, out, 0, node.out_dim))

    def _pack(arrays, dtype):
        offs = np.zeros(len(arrays) + 1, dtype=np.int64)
        offs[1:] = np.cumsum([a.size for a in arrays], dtype=np.int64)
        data = (np.concatenate([a.ravel() for a in arrays])
                if arrays else np.zeros(0, dtype=dtype))
        return data.astype(dtype, copy=False), offs

    mat_data, mat_offs = _pack(mats, np.float64)
    bias_data, bias_offs = _pack(biases, np.float64)
    win_data, win_offs = _pack(windows, np.int64)
    win_cols = np.asarray([t.shape[1] for t in windows] or [0], dtype=np.int64)

    prog = Program(
        ops=np.asarray(ops, dtype=np.int64),
        mats=mats,
        biases=biases,
        windows=windows,
        mat_data=mat_data,
        mat_offs=mat_offs,
        mat_rows=np.asarray([m.shape[0] for m in mats] or [0], dtype=np.int64),
        mat_cols=np.asarray([m.shape[1] for m in mats] or [0], dtype=np.int64),
        bias_data=bias_data,
        bias_offs=bias_offs,
        win_data=win_data,
        win_offs=win_offs,
        win_cols=win_cols,
        slot_offs=slot_offs,
        total=int(slot_offs[-1]),
        pre_slot=pre_slot,
        lam=g.lam,
    )
    g._program = prog
    return prog
