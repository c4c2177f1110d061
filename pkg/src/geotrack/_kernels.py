"""Loop-heavy numeric kernels.

The two inner loops that dominate tracking/evaluation runtime live here:
the rectangular assignment solver and the pairwise box-IoU matrix. Each is
written once as a plain function over ndarrays and JIT-compiled with numba
when available. Set ``GEOTRACK_DISABLE_NUMBA=1`` to force the pure-Python
fallback (same code path, no compilation); ``benchmarks/bench_kernels.py``
compares the two.
"""

import os

import numpy as np

_TRUTHY = ("1", "true", "yes", "on")
NUMBA_DISABLED = os.environ.get("GEOTRACK_DISABLE_NUMBA", "").lower() in _TRUTHY

if not NUMBA_DISABLED:
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _njit = None
else:
    _njit = None

NUMBA_ENABLED = _njit is not None


def _lap_core(cost, u, v, col4row, row4col):
    """Shortest-augmenting-path solver for the rectangular assignment problem.

    Minimizes over complete row assignments of ``cost`` (shape m x n, m <= n).
    Forbidden edges carry +inf. Fills the dual vectors ``u``/``v`` and the
    assignment arrays in place; returns 0 on success, -1 if infeasible.
    """
    m, n = cost.shape
    shortest = np.empty(n, dtype=np.float64)
    path = np.empty(n, dtype=np.int64)
    remaining = np.empty(n, dtype=np.int64)

    for cur_row in range(m):
        for j in range(n):
            shortest[j] = np.inf
            path[j] = -1
            remaining[j] = n - j - 1
        num_remaining = n
        scanned_rows = np.zeros(m, dtype=np.bool_)
        scanned_cols = np.zeros(n, dtype=np.bool_)

        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            index = -1
            lowest = np.inf
            scanned_rows[i] = True
            for it in range(num_remaining):
                j = remaining[it]
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                if shortest[j] < lowest or (
                    shortest[j] == lowest and row4col[j] == -1
                ):
                    lowest = shortest[j]
                    index = it
            min_val = lowest
            if min_val == np.inf:
                return -1
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            scanned_cols[j] = True
            num_remaining -= 1
            remaining[index] = remaining[num_remaining]

        u[cur_row] += min_val
        for k in range(m):
            if scanned_rows[k] and k != cur_row:
                u[k] += min_val - shortest[col4row[k]]
        for j in range(n):
            if scanned_cols[j]:
                v[j] -= min_val - shortest[j]

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return 0


def _iou_matrix_core(boxes_a, boxes_b, out):
    """Pairwise IoU of two box sets in (left, top, width, height) form."""
    for i in range(boxes_a.shape[0]):
        al, at, aw, ah = boxes_a[i, 0], boxes_a[i, 1], boxes_a[i, 2], boxes_a[i, 3]
        ar = al + aw
        ab = at + ah
        area_a = aw * ah
        for j in range(boxes_b.shape[0]):
            bl, bt, bw, bh = boxes_b[j, 0], boxes_b[j, 1], boxes_b[j, 2], boxes_b[j, 3]
            iw = min(ar, bl + bw) - max(al, bl)
            if iw <= 0.0:
                out[i, j] = 0.0
                continue
            ih = min(ab, bt + bh) - max(at, bt)
            if ih <= 0.0:
                out[i, j] = 0.0
                continue
            inter = iw * ih
            union = area_a + bw * bh - inter
            out[i, j] = inter / union if union > 0.0 else 0.0
    return out


lap_core_py = _lap_core
iou_matrix_core_py = _iou_matrix_core

if NUMBA_ENABLED:
    lap_core_jit = _njit(cache=True)(_lap_core)
    iou_matrix_core_jit = _njit(cache=True)(_iou_matrix_core)
    _lap_impl = lap_core_jit
    _iou_impl = iou_matrix_core_jit
else:
    lap_core_jit = None
    iou_matrix_core_jit = None
    _lap_impl = lap_core_py
    _iou_impl = iou_matrix_core_py


def solve_lap_min(cost, impl=None):
    """Solve min-cost complete row assignment for an m x n cost matrix, m <= n.

    Returns (col4row, u, v) or raises ValueError on infeasibility / bad input.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    m, n = cost.shape
    if m > n:
        raise ValueError("cost matrix needs at least as many columns as rows")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    if (cost == -np.inf).any():
        raise ValueError("cost matrix contains -inf")
    u = np.zeros(m, dtype=np.float64)
    v = np.zeros(n, dtype=np.float64)
    col4row = np.full(m, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    if m == 0:
        return col4row, u, v
    rc = (_lap_impl if impl is None else impl)(cost, u, v, col4row, row4col)
    if rc != 0:
        raise ValueError("no feasible complete assignment")
    return col4row, u, v


def iou_matrix(boxes_a, boxes_b, impl=None):
    """IoU between every pair of (left, top, width, height) boxes."""
    boxes_a = np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    out = np.empty((boxes_a.shape[0], boxes_b.shape[0]), dtype=np.float64)
    if out.size == 0:
        return out
    return (_iou_impl if impl is None else impl)(boxes_a, boxes_b, out)


def warmup():
    """Trigger JIT compilation so later calls (and timings) exclude it."""
    cost = np.array([[1.0, 2.0], [2.0, 1.0]])
    solve_lap_min(cost)
    iou_matrix(np.array([[0.0, 0.0, 2.0, 2.0]]), np.array([[1.0, 1.0, 2.0, 2.0]]))
