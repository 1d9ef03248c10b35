"""Hot numeric kernels.

Every kernel exists twice: a loop version compiled with numba and a numpy
version. Both are written to perform the same floating point operations in the
same order, so they agree bit for bit; the module-level names resolve to one of
them according to :data:`manualpa._accel.USE_NUMBA`.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# nearest neighbours / chamfer


@njit
def _nn_sqdist_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    da = np.full(n, np.inf)
    ia = np.zeros(n, dtype=np.int64)
    db = np.full(m, np.inf)
    ib = np.zeros(m, dtype=np.int64)
    for i in range(n):
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < da[i]:
                da[i] = d
                ia[i] = j
            if d < db[j]:
                db[j] = d
                ib[j] = i
    return da, ia, db, ib


def _sqdist_matrix(a, b):
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    dz = a[:, None, 2] - b[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def _nn_sqdist_np(a, b):
    d = _sqdist_matrix(a, b)
    ia = d.argmin(axis=1)
    ib = d.argmin(axis=0)
    return d[np.arange(len(a)), ia], ia, d[ib, np.arange(len(b))], ib


@njit
def _seq_mean(x):
    s = 0.0
    for k in range(x.shape[0]):
        s += x[k]
    return s / x.shape[0]


@njit
def _chamfer_nb(a, b):
    da, _, db, _ = _nn_sqdist_nb(a, b)
    return _seq_mean(da) + _seq_mean(db)


def _py_seq_mean(x):
    s = 0.0
    for v in x.tolist():
        s += v
    return s / len(x)


def _chamfer_np(a, b):
    da, _, db, _ = _nn_sqdist_np(a, b)
    return _py_seq_mean(da) + _py_seq_mean(db)


@njit
def _nn_index_batched_nb(a, b):
    g = a.shape[0]
    ia = np.zeros((g, a.shape[1]), dtype=np.int64)
    ib = np.zeros((g, b.shape[1]), dtype=np.int64)
    for k in range(g):
        _, xa, _, xb = _nn_sqdist_nb(a[k], b[k])
        ia[k] = xa
        ib[k] = xb
    return ia, ib


def _nn_index_batched_np(a, b):
    dx = a[:, :, None, 0] - b[:, None, :, 0]
    dy = a[:, :, None, 1] - b[:, None, :, 1]
    dz = a[:, :, None, 2] - b[:, None, :, 2]
    d = dx * dx + dy * dy + dz * dz
    return d.argmin(axis=2), d.argmin(axis=1)


@njit
def _chamfer_cross_nb(a, b):
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = _chamfer_nb(a[i], b[j])
    return out


def _chamfer_cross_np(a, b):
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = _chamfer_np(a[i], b[j])
    return out


# --------------------------------------------------------------------------
# farthest point sampling


@njit
def _fps_nb(points, m):
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = 0
    for k in range(m):
        out[k] = cur
        mind[cur] = -1.0
        best = -1
        bestd = -np.inf
        for i in range(n):
            if mind[i] < 0.0:
                continue
            dx = points[i, 0] - points[cur, 0]
            dy = points[i, 1] - points[cur, 1]
            dz = points[i, 2] - points[cur, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
            if mind[i] > bestd:
                bestd = mind[i]
                best = i
        cur = best
    return out


def _fps_np(points, m):
    n = len(points)
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = 0
    for k in range(m):
        out[k] = cur
        mind[cur] = -1.0
        live = mind >= 0.0
        diff = points - points[cur]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        mind = np.where(live & (d < mind), d, mind)
        if k + 1 < m:
            cur = int(np.argmax(mind))
    return out


# --------------------------------------------------------------------------
# convex polygon rasterisation (supersampled coverage)


@njit
def _fill_convex_nb(polys, counts, height, width, ss):
    out = np.zeros((polys.shape[0], height, width))
    inv = 1.0 / (ss * ss)
    for p in range(polys.shape[0]):
        nv = counts[p]
        x0 = polys[p, 0, 0]
        x1 = x0
        y0 = polys[p, 0, 1]
        y1 = y0
        for v in range(1, nv):
            x0 = min(x0, polys[p, v, 0])
            x1 = max(x1, polys[p, v, 0])
            y0 = min(y0, polys[p, v, 1])
            y1 = max(y1, polys[p, v, 1])
        c0 = max(int(np.floor(x0)), 0)
        c1 = min(int(np.floor(x1)) + 1, width)
        r0 = max(int(np.floor(y0)), 0)
        r1 = min(int(np.floor(y1)) + 1, height)
        for r in range(r0, r1):
            for c in range(c0, c1):
                cnt = 0
                for sy in range(ss):
                    py = r + (sy + 0.5) / ss
                    for sx in range(ss):
                        px = c + (sx + 0.5) / ss
                        inside = True
                        for v in range(nv):
                            w = v + 1 if v + 1 < nv else 0
                            ex = polys[p, w, 0] - polys[p, v, 0]
                            ey = polys[p, w, 1] - polys[p, v, 1]
                            cross = ex * (py - polys[p, v, 1]) - ey * (px - polys[p, v, 0])
                            if cross < 0.0:
                                inside = False
                                break
                        if inside:
                            cnt += 1
                out[p, r, c] = cnt * inv
    return out


def _fill_convex_np(polys, counts, height, width, ss):
    out = np.zeros((polys.shape[0], height, width))
    inv = 1.0 / (ss * ss)
    offs = (np.arange(ss) + 0.5) / ss
    for p in range(polys.shape[0]):
        vs = polys[p, : counts[p]]
        c0 = max(int(np.floor(vs[:, 0].min())), 0)
        c1 = min(int(np.floor(vs[:, 0].max())) + 1, width)
        r0 = max(int(np.floor(vs[:, 1].min())), 0)
        r1 = min(int(np.floor(vs[:, 1].max())) + 1, height)
        if r1 <= r0 or c1 <= c0:
            continue
        rows = np.arange(r0, r1)
        cols = np.arange(c0, c1)
        # axes: row, col, sub-row, sub-col
        py = rows[:, None, None, None] + offs[None, None, :, None]
        px = cols[None, :, None, None] + offs[None, None, None, :]
        inside = np.ones((len(rows), len(cols), ss, ss), dtype=bool)
        for v in range(len(vs)):
            w = (v + 1) % len(vs)
            ex = vs[w, 0] - vs[v, 0]
            ey = vs[w, 1] - vs[v, 1]
            inside &= ex * (py - vs[v, 1]) - ey * (px - vs[v, 0]) >= 0.0
        out[p, r0:r1, c0:c1] = inside.sum(axis=(2, 3)) * inv
    return out


# --------------------------------------------------------------------------
# linear assignment: shortest augmenting path with dual potentials, then a
# lexicographic sweep over the tight (zero reduced cost) edges


@njit
def _lsa_duals_nb(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    return u, v, p


def _lsa_duals_np(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:] = np.where(better, cur, minv[1:])
            way[1:] = np.where(better, j0, way[1:])
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    return u, v, p


@njit
def _lex_sweep(tight, col_of_row):
    """Turn any perfect matching of the tight graph into its lexicographically smallest one."""
    n = tight.shape[0]
    row_of_col = np.empty(n, dtype=np.int64)
    for r in range(n):
        row_of_col[col_of_row[r]] = r
    fixed_col = np.zeros(n, dtype=np.bool_)
    parent_row = np.empty(n, dtype=np.int64)
    seen = np.zeros(n, dtype=np.bool_)
    queue = np.empty(n, dtype=np.int64)
    for r in range(n):
        for j in range(n):
            if fixed_col[j] or not tight[r, j]:
                continue
            if col_of_row[r] == j:
                fixed_col[j] = True
                break
            # try r -> j; the row displaced from j must reach r's old column
            target = col_of_row[r]
            start = row_of_col[j]
            seen[:] = False
            seen[j] = True
            head = 0
            tail = 1
            queue[0] = start
            found = -1
            while head < tail and found < 0:
                x = queue[head]
                head += 1
                for y in range(n):
                    if seen[y] or fixed_col[y] or not tight[x, y]:
                        continue
                    seen[y] = True
                    parent_row[y] = x
                    if y == target:
                        found = y
                        break
                    queue[tail] = row_of_col[y]
                    tail += 1
            if found < 0:
                continue
            y = found
            while True:
                x = parent_row[y]
                prev = col_of_row[x]
                col_of_row[x] = y
                row_of_col[y] = x
                if x == start:
                    break
                y = prev
            col_of_row[r] = j
            row_of_col[j] = r
            fixed_col[j] = True
            break
    return col_of_row


def _lsa(duals, sweep, cost):
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    u, v, p = duals(cost)
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    reduced = cost - u[1:, None] - v[None, 1:]
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    return sweep(reduced <= tol, col_of_row)


def _lsa_nb(cost):
    return _lsa(_lsa_duals_nb, _lex_sweep, cost)


def _lsa_np(cost):
    return _lsa(_lsa_duals_np, getattr(_lex_sweep, "py_func", _lex_sweep), cost)


if USE_NUMBA:
    nn_sqdist = _nn_sqdist_nb
    chamfer = _chamfer_nb
    nn_index_batched = _nn_index_batched_nb
    chamfer_cross = _chamfer_cross_nb
    fps = _fps_nb
    fill_convex = _fill_convex_nb
    lsa = _lsa_nb
else:
    nn_sqdist = _nn_sqdist_np
    chamfer = _chamfer_np
    nn_index_batched = _nn_index_batched_np
    chamfer_cross = _chamfer_cross_np
    fps = _fps_np
    fill_convex = _fill_convex_np
    lsa = _lsa_np

BACKENDS = {
    "numba": {
        "nn_sqdist": _nn_sqdist_nb,
        "chamfer": _chamfer_nb,
        "nn_index_batched": _nn_index_batched_nb,
        "chamfer_cross": _chamfer_cross_nb,
        "fps": _fps_nb,
        "fill_convex": _fill_convex_nb,
        "lsa": _lsa_nb,
    },
    "numpy": {
        "nn_sqdist": _nn_sqdist_np,
        "chamfer": _chamfer_np,
        "nn_index_batched": _nn_index_batched_np,
        "chamfer_cross": _chamfer_cross_np,
        "fps": _fps_np,
        "fill_convex": _fill_convex_np,
        "lsa": _lsa_np,
    },
}
