"""Dense-matrix builders for structured linear image operators.

All builders use the channel-major flat layout ``index = c*h*w + row*w + col``
(row-major within a channel), matching the global pixel convention. Matrices
are built once at graph-assembly or layer-construction time; desk-scale sizes
make dense representations cheap.
"""

from __future__ import annotations

import numpy as np


def flat_index(c: int, r: int, col: int, h: int, w: int) -> int:
    return c * h * w + r * w + col


def conv2d_index_map(
    c_out: int, c_in: int, k: int, h: int, w: int, stride: int, padding: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    """Triples (out_idx, in_idx, kernel_idx) linking matrix entries to kernel taps.

    Zero padding: taps falling outside the image contribute nothing and are
    omitted from the map. Returns the maps plus the output (oh, ow).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("kernel does not fit the padded image")
    out_idx, in_idx, ker_idx = [], [], []
    for co in range(c_out):
        for orow in range(oh):
            for ocol in range(ow):
                o = flat_index(co, orow, ocol, oh, ow)
                for ci in range(c_in):
                    for dr in range(k):
                        r = orow * stride - padding + dr
                        if r < 0 or r >= h:
                            continue
                        for dc in range(k):
                            c = ocol * stride - padding + dc
                            if c < 0 or c >= w:
                                continue
                            out_idx.append(o)
                            in_idx.append(flat_index(ci, r, c, h, w))
                            ker_idx.append(((co * c_in + ci) * k + dr) * k + dc)
    return (
        np.asarray(out_idx, dtype=np.int64),
        np.asarray(in_idx, dtype=np.int64),
        np.asarray(ker_idx, dtype=np.int64),
        oh,
        ow,
    )


def conv2d_matrix(
    kernel: np.ndarray, h: int, w: int, stride: int, padding: int
) -> tuple[np.ndarray, int, int]:
    """Materialize a conv as a dense (c_out*oh*ow, c_in*h*w) matrix."""
    c_out, c_in, k, k2 = kernel.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    o_idx, i_idx, k_idx, oh, ow = conv2d_index_map(c_out, c_in, k, h, w, stride, padding)
    mat = np.zeros((c_out * oh * ow, c_in * h * w))
    mat[o_idx, i_idx] = kernel.reshape(-1)[k_idx]
    return mat, oh, ow


def pool_windows(h: int, w: int, window: int, channels: int = 1) -> np.ndarray:
    """Non-overlapping (window x window) index table, one row per output cell."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if h % window or w % window:
        raise ValueError(f"image {h}x{w} is not divisible by pooling window {window}")
    oh, ow = h // window, w // window
    table = np.empty((channels * oh * ow, window * window), dtype=np.int64)
    for c in range(channels):
        for orow in range(oh):
            for ocol in range(ow):
                cells = [
                    flat_index(c, orow * window + dr, ocol * window + dc, h, w)
                    for dr in range(window)
                    for dc in range(window)
                ]
                table[flat_index(c, orow, ocol, oh, ow)] = cells
    return table


def mean_pool_matrix(h: int, w: int, window: int, channels: int = 1) -> np.ndarray:
    table = pool_windows(h, w, window, channels)
    mat = np.zeros((table.shape[0], channels * h * w))
    for row, cells in enumerate(table):
        mat[row, cells] = 1.0 / cells.size
    return mat


def upsample_matrix(h: int, w: int, factor: int, channels: int = 1) -> np.ndarray:
    """Nearest-neighbour upsampling as a 0/1 matrix of shape (c*H*f*W*f, c*h*w)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    oh, ow = h * factor, w * factor
    mat = np.zeros((channels * oh * ow, channels * h * w))
    for c in range(channels):
        for r in range(oh):
            for col in range(ow):
                mat[flat_index(c, r, col, oh, ow), flat_index(c, r // factor, col // factor, h, w)] = 1.0
    return mat


def mean_filter_matrix(h: int, w: int, window: int) -> np.ndarray:
    """Windowed mean with in-bounds-only averaging near the border.

    Position-dependent weights keep the operator a single linear map, so the
    filter contributes no pieces of its own to the computation graph.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    half = window // 2
    n = h * w
    mat = np.zeros((n, n))
    for r in range(h):
        for col in range(w):
            rows = range(max(0, r - half), min(h, r + half + 1))
            cols = range(max(0, col - half), min(w, col + half + 1))
            cells = [rr * w + cc for rr in rows for cc in cols]
            mat[r * w + col, cells] = 1.0 / len(cells)
    return mat
