"""Numba kernels for first-order fast marching on triangle meshes.

Everything is intrinsic: the kernels only see per-triangle edge lengths,
so isometric meshes give identical fields up to round-off in the lengths.
"""

import heapq

import numba as nb
import numpy as np

# prefer OpenMP; an outdated TBB otherwise triggers a warning on first use
nb.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

FAR, TRIAL, KNOWN = 0, 1, 2
MAX_UNFOLD = 10
EPS = 1e-12


@nb.njit(cache=True)
def _planar(ax, ay, bx, by, cx, cy, da, db):
    """Planar-front update of C from known A, B (arbitrary 2D placement).

    Returns inf when the front direction does not reach C through segment AB.
    """
    ex, ey = bx - ax, by - ay
    L = np.sqrt(ex * ex + ey * ey)
    ex /= L
    ey /= L
    # unit normal of AB pointing at C
    px, py = -ey, ex
    hc = (cx - ax) * px + (cy - ay) * py
    if hc < 0:
        px, py, hc = -px, -py, -hc
    along = (db - da) / L
    if along > 1.0 or along < -1.0:
        return np.inf
    perp = np.sqrt(1.0 - along * along)
    if perp < EPS:
        return np.inf
    nx = along * ex + perp * px
    ny = along * ey + perp * py
    t = da + nx * (cx - ax) + ny * (cy - ay)
    # back-trace from C along -n to the line AB
    tau = hc / perp
    s = (cx - ax) * ex + (cy - ay) * ey - tau * along
    if s < -EPS * L or s > L * (1.0 + EPS):
        return np.inf
    if t < max(da, db):
        return np.inf
    return t


@nb.njit(cache=True)
def _circular(ax, ay, bx, by, cx, cy, da, db):
    """Point-source update: C's distance to a virtual source S with
    ``|SA| = da`` and ``|SB| = db`` placed across AB from C.

    Exact on flat meshes. Returns inf when S cannot be placed or the
    segment SC misses the edge AB.
    """
    ex, ey = bx - ax, by - ay
    L = np.sqrt(ex * ex + ey * ey)
    ex /= L
    ey /= L
    x = (da * da - db * db + L * L) / (2.0 * L)
    h2 = da * da - x * x
    if h2 < 0:
        return np.inf
    px, py = -ey, ex
    hc = (cx - ax) * px + (cy - ay) * py
    if hc < 0:
        px, py, hc = -px, -py, -hc
    h = np.sqrt(h2)
    # S = A + x e - h p ; C = A + cu e + hc p
    cu = (cx - ax) * ex + (cy - ay) * ey
    s = x + (cu - x) * h / (h + hc)
    if s < -EPS * L or s > L * (1.0 + EPS):
        return np.inf
    du, dv = cu - x, hc + h
    t = np.sqrt(du * du + dv * dv)
    if t < max(da, db):
        return np.inf
    return t


@nb.njit(cache=True)
def _local(ax, ay, bx, by, cx, cy, da, db, circular):
    if circular:
        return _circular(ax, ay, bx, by, cx, cy, da, db)
    return _planar(ax, ay, bx, by, cx, cy, da, db)


@nb.njit(cache=True)
def _place(p, q, dp, dq, cx, cy):
    """Point at distance dp from p and dq from q, on the side of line pq away from c."""
    ex, ey = q[0] - p[0], q[1] - p[1]
    L = np.sqrt(ex * ex + ey * ey)
    ex /= L
    ey /= L
    x = (dp * dp - dq * dq + L * L) / (2.0 * L)
    h2 = dp * dp - x * x
    h = np.sqrt(h2) if h2 > 0 else 0.0
    nx, ny = -ey, ex
    if (cx - p[0]) * nx + (cy - p[1]) * ny > 0:
        nx, ny = -nx, -ny
    return p[0] + x * ex + h * nx, p[1] + x * ey + h * ny


@nb.njit(cache=True)
def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


@nb.njit(cache=True)
def _edge_len(tris, lens, t, a, b):
    for k in range(3):
        u = tris[t, (k + 1) % 3]
        w = tris[t, (k + 2) % 3]
        if (u == a and w == b) or (u == b and w == a):
            return lens[t, k]
    return np.nan


@nb.njit(cache=True)
def _unfold_update(tris, lens, tnbr, t, kc, dist, state, circular):
    """Update for the obtuse corner ``kc`` of triangle ``t``.

    Unfolds neighbouring triangles across the opposite edge until a vertex
    lands inside the obtuse angle, then splits the update in two acute ones.
    Returns inf when no valid supporting vertex is found.
    """
    ia = tris[t, (kc + 1) % 3]
    ib = tris[t, (kc + 2) % 3]
    c_ab = lens[t, kc]
    b_ac = lens[t, (kc + 2) % 3]
    a_bc = lens[t, (kc + 1) % 3]
    ax, ay = 0.0, 0.0
    bx, by = c_ab, 0.0
    cxx = (b_ac * b_ac + c_ab * c_ab - a_bc * a_bc) / (2.0 * c_ab)
    h2 = b_ac * b_ac - cxx * cxx
    cyy = np.sqrt(h2) if h2 > 0 else 0.0
    # cone at C spanned by CA (one side) and CB (other side)
    ux, uy = ax - cxx, ay - cyy
    wx, wy = bx - cxx, by - cyy
    orient = _cross(ux, uy, wx, wy)

    p_id, q_id = ia, ib
    p = np.array([ax, ay])
    q = np.array([bx, by])
    cur = t
    for _ in range(MAX_UNFOLD):
        # triangle across edge (p, q) from cur
        nxt = -1
        for k in range(3):
            u = tris[cur, (k + 1) % 3]
            w = tris[cur, (k + 2) % 3]
            if (u == p_id and w == q_id) or (u == q_id and w == p_id):
                nxt = tnbr[cur, k]
                break
        if nxt < 0:
            return np.inf
        r_id = -1
        for k in range(3):
            if tris[nxt, k] != p_id and tris[nxt, k] != q_id:
                r_id = tris[nxt, k]
        dpr = _edge_len(tris, lens, nxt, p_id, r_id)
        dqr = _edge_len(tris, lens, nxt, q_id, r_id)
        rx, ry = _place(p, q, dpr, dqr, cxx, cyy)
        vx, vy = rx - cxx, ry - cyy
        s1 = _cross(ux, uy, vx, vy) * orient
        s2 = _cross(vx, vy, wx, wy) * orient
        if s1 > 0 and s2 > 0:
            if state[r_id] != KNOWN:
                return np.inf
            best = np.inf
            if state[ia] == KNOWN:
                best = min(best, _local(ax, ay, rx, ry, cxx, cyy, dist[ia], dist[r_id], circular))
            if state[ib] == KNOWN:
                best = min(best, _local(rx, ry, bx, by, cxx, cyy, dist[r_id], dist[ib], circular))
            vr = np.sqrt(vx * vx + vy * vy)
            best = min(best, dist[r_id] + vr)
            return best
        if s1 <= 0:
            # R lies beyond the CA side: cone crosses edge (R, Q)
            p_id = r_id
            p = np.array([rx, ry])
        else:
            q_id = r_id
            q = np.array([rx, ry])
        cur = nxt
    return np.inf


@nb.njit(cache=True)
def _update_from_triangle(tris, lens, tnbr, t, kc, dist, state, circular):
    ia = tris[t, (kc + 1) % 3]
    ib = tris[t, (kc + 2) % 3]
    a_bc = lens[t, (kc + 1) % 3]
    b_ac = lens[t, (kc + 2) % 3]
    c_ab = lens[t, kc]
    best = np.inf
    if state[ia] == KNOWN:
        best = dist[ia] + b_ac
    if state[ib] == KNOWN:
        best = min(best, dist[ib] + a_bc)
    if state[ia] == KNOWN and state[ib] == KNOWN:
        cos_c = (a_bc * a_bc + b_ac * b_ac - c_ab * c_ab) / (2.0 * a_bc * b_ac)
        if cos_c >= -EPS:
            cx = (b_ac * b_ac + c_ab * c_ab - a_bc * a_bc) / (2.0 * c_ab)
            h2 = b_ac * b_ac - cx * cx
            cy = np.sqrt(h2) if h2 > 0 else 0.0
            best = min(best, _local(0.0, 0.0, c_ab, 0.0, cx, cy, dist[ia], dist[ib], circular))
        else:
            best = min(best, _unfold_update(tris, lens, tnbr, t, kc, dist, state, circular))
    return best


@nb.njit(cache=True)
def march(n, tris, lens, tnbr, vt_ptr, vt_tri, source, circular=True):
    """Distances from ``source``; also returns the acceptance order."""
    dist = np.full(n, np.inf)
    state = np.zeros(n, dtype=np.int8)
    order = np.full(n, -1, dtype=np.int64)
    dist[source] = 0.0
    state[source] = TRIAL
    heap = [(0.0, np.int64(source))]
    count = 0
    while len(heap) > 0:
        d, v = heapq.heappop(heap)
        if state[v] == KNOWN or d > dist[v]:
            continue
        state[v] = KNOWN
        order[count] = v
        count += 1
        for idx in range(vt_ptr[v], vt_ptr[v + 1]):
            t = vt_tri[idx]
            for kc in range(3):
                c = tris[t, kc]
                if state[c] == KNOWN:
                    continue
                val = _update_from_triangle(tris, lens, tnbr, t, kc, dist, state, circular)
                # keep the front monotone
                if val < d:
                    val = d
                if val < dist[c]:
                    dist[c] = val
                    state[c] = TRIAL
                    heapq.heappush(heap, (val, np.int64(c)))
    return dist, order[:count]


@nb.njit(cache=True, parallel=True)
def march_many(n, tris, lens, tnbr, vt_ptr, vt_tri, sources, circular=True):
    out = np.empty((len(sources), n))
    for i in nb.prange(len(sources)):
        d, _ = march(n, tris, lens, tnbr, vt_ptr, vt_tri, sources[i], circular)
        out[i] = d
    return out


def topology(v, t):
    """Per-triangle edge lengths, edge-neighbour table, vertex-to-triangle CSR."""
    n = len(v)
    m = len(t)
    lens = np.empty((m, 3))
    for k in range(3):
        lens[:, k] = np.linalg.norm(v[t[:, (k + 1) % 3]] - v[t[:, (k + 2) % 3]], axis=1)
    # edge opposite corner k is (t[k+1], t[k+2])
    a = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    b = np.concatenate([t[:, 2], t[:, 0], t[:, 1]])
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    key = lo.astype(np.int64) * n + hi
    tri_id = np.tile(np.arange(m), 3)
    corner = np.repeat(np.arange(3), m)
    order = np.argsort(key, kind="stable")
    ks = key[order]
    tnbr = np.full((m, 3), -1, dtype=np.int64)
    same = np.flatnonzero(ks[1:] == ks[:-1])
    for s in same:
        i, j = order[s], order[s + 1]
        tnbr[tri_id[i], corner[i]] = tri_id[j]
        tnbr[tri_id[j], corner[j]] = tri_id[i]
    flat = t.ravel()
    vt_tri = np.argsort(flat, kind="stable") // 3
    counts = np.bincount(flat, minlength=n)
    vt_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return lens, tnbr, vt_ptr, vt_tri.astype(np.int64)
