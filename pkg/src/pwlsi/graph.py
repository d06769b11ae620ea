"""Computation graphs of piecewise-linear nodes ending in a threshold node.

A graph is a topologically ordered node list over a single source (the input
image, referenced as node index -1) and a single sink, the threshold node
that turns the per-pixel error vector into an anomaly region. Linear node
kinds (affine, conv2d, meanpool, upsample, meanfilter, matmul_left) carry
their lowered dense matrix; relu/abs/maxpool switch pieces by sign or argmax.

Only exactly piecewise-linear node kinds exist; smooth activations such as
sigmoid or tanh are rejected at construction.
"""

from __future__ import annotations

import numpy as np

from . import operators
from .hypothesis import AnomalyRegion
from .linalg import pixels_of

LINEAR_KINDS = frozenset({"affine", "conv2d", "meanpool", "upsample", "meanfilter", "matmul_left"})
PIECEWISE_KINDS = frozenset({"relu", "abs", "maxpool"})
NODE_KINDS = LINEAR_KINDS | PIECEWISE_KINDS | {"concat", "threshold"}


class GraphError(Exception):
    """Malformed graph structure or a shape mismatch during evaluation."""


class PwlNode:
    """One graph node: a kind tag, input edges, and kind-specific payload."""

    __slots__ = ("kind", "inputs", "in_dim", "out_dim", "weight", "bias", "windows", "lam", "meta")

    def __init__(self, kind, inputs, in_dim, out_dim, weight=None, bias=None,
                 windows=None, lam=None, meta=None):
        if kind not in NODE_KINDS:
            raise GraphError(f"unsupported node kind {kind!r}; only piecewise-linear kinds exist")
        self.kind = kind
        self.inputs = tuple(int(i) for i in inputs)
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.weight = None if weight is None else np.ascontiguousarray(weight, dtype=np.float64)
        self.bias = None if bias is None else np.ascontiguousarray(bias, dtype=np.float64)
        self.windows = None if windows is None else np.ascontiguousarray(windows, dtype=np.int64)
        self.lam = None if lam is None else float(lam)
        self.meta = dict(meta or {})
        self._validate()

    def _validate(self):
        n_inputs = 2 if self.kind == "concat" else 1
        if len(self.inputs) != n_inputs:
            raise GraphError(f"{self.kind} node takes {n_inputs} input(s), got {len(self.inputs)}")
        if self.kind in LINEAR_KINDS:
            if self.weight is None or self.weight.shape != (self.out_dim, self.in_dim):
                raise GraphError(f"{self.kind} node weight must be ({self.out_dim}, {self.in_dim})")
            if self.bias is not None and self.bias.shape != (self.out_dim,):
                raise GraphError(f"{self.kind} node bias must have length {self.out_dim}")
        elif self.kind in ("relu", "abs"):
            if self.out_dim != self.in_dim:
                raise GraphError(f"{self.kind} node must preserve dimension")
        elif self.kind == "maxpool":
            if self.windows is None or self.windows.shape[0] != self.out_dim:
                raise GraphError("maxpool node needs one window row per output cell")
            if self.windows.min() < 0 or self.windows.max() >= self.in_dim:
                raise GraphError("maxpool window indices out of range")
        elif self.kind == "threshold":
            if self.lam is None or self.lam <= 0.0:
                raise GraphError("threshold node needs lam > 0")
            if self.out_dim != self.in_dim:
                raise GraphError("threshold node must preserve dimension")


def affine_node(weight, bias, inputs=(-1,), kind="affine", meta=None) -> PwlNode:
    weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    out_dim, in_dim = weight.shape
    bias = np.zeros(out_dim) if bias is None else np.asarray(bias, dtype=np.float64)
    return PwlNode(kind, inputs, in_dim, out_dim, weight=weight, bias=bias, meta=meta)


def conv2d_node(kernel, h, w, stride, padding, bias=None, inputs=(-1,)) -> PwlNode:
    kernel = np.asarray(kernel, dtype=np.float64)
    c_out, c_in = kernel.shape[0], kernel.shape[1]
    mat, oh, ow = operators.conv2d_matrix(kernel, h, w, stride, padding)
    bias = np.zeros(mat.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    meta = {"c_out": c_out, "c_in": c_in, "k": kernel.shape[2], "stride": stride,
            "padding": padding, "h": h, "w": w, "oh": oh, "ow": ow}
    return PwlNode("conv2d", inputs, mat.shape[1], mat.shape[0], weight=mat, bias=bias, meta=meta)


def maxpool_node(h, w, window, channels=1, inputs=(-1,)) -> PwlNode:
    table = operators.pool_windows(h, w, window, channels)
    return PwlNode("maxpool", inputs, channels * h * w, table.shape[0], windows=table,
                   meta={"h": h, "w": w, "window": window, "channels": channels})


def meanpool_node(h, w, window, channels=1, inputs=(-1,)) -> PwlNode:
    mat = operators.mean_pool_matrix(h, w, window, channels)
    return affine_node(mat, None, inputs=inputs, kind="meanpool",
                       meta={"h": h, "w": w, "window": window, "channels": channels})


def mean_filter_node(h, w, window, inputs=(-1,)) -> PwlNode:
    mat = operators.mean_filter_matrix(h, w, window)
    return affine_node(mat, None, inputs=inputs, kind="meanfilter",
                       meta={"h": h, "w": w, "window": window})


class PwlGraph:
    """Topologically ordered piecewise-linear DAG; last node is the threshold.

    Immutable after assembly: forward evaluation and line propagation never
    mutate the graph, so one instance is safe to share across trial workers.
    """

    def __init__(self, nodes, n: int):
        self.nodes: tuple[PwlNode, ...] = tuple(nodes)
        self.n = int(n)
        self._program = None  # lowered-program cache, filled lazily
        self._validate()

    def _validate(self):
        if not self.nodes:
            raise GraphError("graph needs at least a threshold node")
        dims = {-1: self.n}
        consumed = set()
        for i, node in enumerate(self.nodes):
            expected = 0
            for j in node.inputs:
                if j >= i or j < -1:
                    raise GraphError(f"node {i} references node {j}; order must be topological")
                expected += dims[j]
                consumed.add(j)
            if expected != node.in_dim:
                raise GraphError(f"node {i} ({node.kind}) expects dim {node.in_dim}, inputs give {expected}")
            if node.kind == "threshold" and i != len(self.nodes) - 1:
                raise GraphError("threshold must be the terminal node")
            dims[i] = node.out_dim
        if self.nodes[-1].kind != "threshold":
            raise GraphError("graph must end in a threshold node")
        dangling = set(range(len(self.nodes) - 1)) - consumed
        if dangling:
            raise GraphError(f"nodes {sorted(dangling)} do not feed the sink")

    @property
    def lam(self) -> float:
        return self.nodes[-1].lam

    @property
    def error_dim(self) -> int:
        return self.nodes[-1].in_dim

    def node_values(self, x: np.ndarray) -> list[np.ndarray]:
        """Evaluate every node at x; columns are independent inputs."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.n:
            raise GraphError(f"input has dimension {x.shape[0]}, graph expects {self.n}")
        values: dict[int, np.ndarray] = {-1: x}
        out: list[np.ndarray] = []
        for i, node in enumerate(self.nodes[:-1]):
            ins = [values[j] for j in node.inputs]
            if node.kind in LINEAR_KINDS:
                v = node.weight @ ins[0]
                if node.bias is not None:
                    v = v + (node.bias if v.ndim == 1 else node.bias[:, None])
            elif node.kind == "relu":
                v = np.maximum(ins[0], 0.0)
            elif node.kind == "abs":
                v = np.abs(ins[0])
            elif node.kind == "maxpool":
                v = ins[0][node.windows].max(axis=1)
            elif node.kind == "concat":
                v = np.concatenate(ins, axis=0)
            values[i] = v
            out.append(v)
        return out


def forward(g: PwlGraph, x) -> tuple[np.ndarray, AnomalyRegion]:
    """Per-pixel anomaly scores and the thresholded region for one image."""
    vec = pixels_of(x)
    errors = forward_errors(g, vec)
    return errors, AnomalyRegion(errors >= g.lam)


def forward_errors(g: PwlGraph, x: np.ndarray) -> np.ndarray:
    """Pre-threshold error vector(s); accepts (n,) or a column-stacked (n, B)."""
    x = np.asarray(x, dtype=np.float64)
    idx = g.nodes[-1].inputs[0]
    if idx == -1:
        if x.shape[0] != g.n:
            raise GraphError(f"input has dimension {x.shape[0]}, graph expects {g.n}")
        return x
    return g.node_values(x)[idx]


def assemble_detector(vae, lam: float, filter_window: int = 1) -> PwlGraph:
    """Build the detector graph: |reconstruction - input|, filtered, thresholded.

    The reconstruction branch is the model's deterministic encoder-mean ->
    decoder path; the identity branch carries the input alongside it. Their
    concatenation is collapsed to a difference by a fixed [I, -I] matrix.
    filter_window = 1 omits the mean-filter node entirely.
    """
    if lam <= 0.0:
        raise GraphError("lam must be positive")
    if filter_window < 1 or filter_window % 2 == 0:
        raise GraphError("filter_window must be odd and >= 1")

    n = vae.n
    nodes: list[PwlNode] = []
    prev = -1
    for spec in vae.recon_path_spec():
        node = _node_from_spec(spec, inputs=(prev,))
        nodes.append(node)
        prev = len(nodes) - 1
    if not nodes or nodes[-1].out_dim != n:
        raise GraphError("reconstruction path must map the image back to its own dimension")

    nodes.append(PwlNode("concat", (prev, -1), 2 * n, 2 * n))
    diff = np.hstack([np.eye(n), -np.eye(n)])
    nodes.append(affine_node(diff, None, inputs=(len(nodes) - 1,), kind="matmul_left"))
    nodes.append(PwlNode("abs", (len(nodes) - 1,), n, n))
    if filter_window > 1:
        h, w = vae.image_shape
        nodes.append(mean_filter_node(h, w, filter_window, inputs=(len(nodes) - 1,)))
    nodes.append(PwlNode("threshold", (len(nodes) - 1,), n, n, lam=lam))
    return PwlGraph(nodes, n)


def _node_from_spec(spec: dict, inputs) -> PwlNode:
    kind = spec["kind"]
    if kind == "affine":
        return affine_node(spec["weight"], spec.get("bias"), inputs=inputs)
    if kind == "relu":
        dim = int(spec["dim"])
        return PwlNode("relu", inputs, dim, dim)
    if kind == "conv2d":
        return conv2d_node(spec["kernel"], spec["h"], spec["w"], spec["stride"],
                           spec["padding"], bias=spec.get("bias"), inputs=inputs)
    if kind == "maxpool":
        return maxpool_node(spec["h"], spec["w"], spec["window"],
                            channels=spec.get("channels", 1), inputs=inputs)
    if kind == "upsample":
        mat = operators.upsample_matrix(spec["h"], spec["w"], spec["factor"],
                                        channels=spec.get("channels", 1))
        return affine_node(mat, None, inputs=inputs, kind="upsample", meta=dict(spec))
    raise GraphError(f"unsupported layer kind {kind!r} in reconstruction path")
