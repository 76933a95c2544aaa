"""Zero-level-set extraction on regular 2d grids (marching squares).

Cells are scanned for sign changes of ``values - level``; crossing points
are placed by linear interpolation along cell edges and chained into
polylines by shared edge identity, so closed loops come back closed.
Saddle cells are disambiguated by the cell-center average.
"""

from __future__ import annotations

import numpy as np


def _edge_point(key, vals, xs, ys, level):
    kind, i, j = key
    if kind == "x":
        v0, v1 = vals[i, j], vals[i + 1, j]
        t = (level - v0) / (v1 - v0)
        return (xs[i] + t * (xs[i + 1] - xs[i]), ys[j])
    v0, v1 = vals[i, j], vals[i, j + 1]
    t = (level - v0) / (v1 - v0)
    return (xs[i], ys[j] + t * (ys[j + 1] - ys[j]))


def contour_polylines(values, xs, ys, level: float = 0.0):
    """Level curves of values[i, j] sampled at (xs[i], ys[j]).

    Returns a list of (m, 2) arrays of curve points; loops repeat their
    first point at the end.
    """
    vals = np.asarray(values, dtype=float)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if vals.shape != (xs.size, ys.size):
        raise ValueError("values must have shape (len(xs), len(ys))")
    s = vals - level
    # nudge exact zeros off the level so every crossing is transversal
    tiny = 1e-12 * max(1.0, float(np.max(np.abs(s))) or 1.0)
    s = np.where(s == 0.0, tiny, s)

    pos = s > 0
    segments = []
    nx, ny = vals.shape
    for i in range(nx - 1):
        for j in range(ny - 1):
            c00 = pos[i, j]
            c10 = pos[i + 1, j]
            c11 = pos[i + 1, j + 1]
            c01 = pos[i, j + 1]
            case = (c00 | (c10 << 1) | (c11 << 2) | (c01 << 3))
            if case in (0, 15):
                continue
            bottom = ("x", i, j)
            top = ("x", i, j + 1)
            left = ("y", i, j)
            right = ("y", i + 1, j)
            if case in (1, 14):
                segments.append((left, bottom))
            elif case in (2, 13):
                segments.append((bottom, right))
            elif case in (3, 12):
                segments.append((left, right))
            elif case in (4, 11):
                segments.append((right, top))
            elif case in (6, 9):
                segments.append((bottom, top))
            elif case in (7, 8):
                segments.append((left, top))
            elif case in (5, 10):
                center = 0.25 * (s[i, j] + s[i + 1, j]
                                 + s[i + 1, j + 1] + s[i, j + 1])
                # join the diagonal pair that the center sign connects
                if (case == 5) != (center > 0):
                    segments.append((left, bottom))
                    segments.append((right, top))
                else:
                    segments.append((left, top))
                    segments.append((bottom, right))

    adj = {}
    for a, b in segments:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)

    used = set()

    def walk(start):
        chain = [start]
        prev = None
        cur = start
        while True:
            nxt = None
            for cand in adj[cur]:
                if cand != prev and (min(cur, cand, key=repr),
                                     max(cur, cand, key=repr)) not in used:
                    nxt = cand
                    break
            if nxt is None:
                return chain
            used.add((min(cur, nxt, key=repr), max(cur, nxt, key=repr)))
            chain.append(nxt)
            if nxt == start:
                return chain
            prev, cur = cur, nxt

    polylines = []
    # open curves first so their tails are not consumed by loop walks
    for start in sorted(adj, key=repr):
        if len(adj[start]) == 1:
            chain = walk(start)
            if len(chain) > 1:
                polylines.append(chain)
    for start in sorted(adj, key=repr):
        chain = walk(start)
        if len(chain) > 1:
            polylines.append(chain)

    out = []
    for chain in polylines:
        pts = np.array([_edge_point(k, vals, xs, ys, level) for k in chain])
        out.append(pts)
    return out


def point_in_polygon(point, polygon: np.ndarray) -> bool:
    """Ray-casting test; polygon is an (m, 2) loop (closure optional)."""
    x, y = float(point[0]), float(point[1])
    px = polygon[:, 0]
    py = polygon[:, 1]
    n = len(polygon)
    inside = False
    for k in range(n - 1):
        x0, y0, x1, y1 = px[k], py[k], px[k + 1], py[k + 1]
        if (y0 > y) != (y1 > y):
            xc = x0 + (y - y0) / (y1 - y0) * (x1 - x0)
            if xc > x:
                inside = not inside
    return inside


def arc_length_resample(points: np.ndarray, n: int) -> np.ndarray:
    """n points spaced evenly in arc length along a polyline."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total == 0:
        return np.repeat(points[:1], n, axis=0)
    # drop the duplicated closure point from the sample range on loops
    closed = np.allclose(points[0], points[-1])
    targets = (np.linspace(0.0, total, n, endpoint=not closed)
               if closed else np.linspace(0.0, total, n))
    out = np.empty((n, points.shape[1]))
    for j in range(points.shape[1]):
        out[:, j] = np.interp(targets, s, points[:, j])
    return out
