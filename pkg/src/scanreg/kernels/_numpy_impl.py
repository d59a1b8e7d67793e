"""Pure-numpy implementations of the hot per-pixel kernels.

Reference semantics for the numba versions in _numba_impl.py; the two must
stay interchangeable (same shapes, same tie-breaking).
"""

from __future__ import annotations

import numpy as np


def depth_normals(depth, fx, fy, cx, cy, gap_abs=0.01, gap_rel=0.015):
    """Per-pixel surface normals from central differences over a 5x5 window.

    Returns (normals (h, w, 3), valid (h, w) bool).  Normals are unit and
    oriented toward the camera (dot with the backprojected point <= 0).
    A second-difference depth test (threshold gap_abs + gap_rel * z) rejects
    pixels whose support straddles a contour without penalizing slanted
    surfaces.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    px = (u[None, :] - cx) / fx * depth
    py = (v[:, None] - cy) / fy * depth
    pts = np.stack([px, py, depth], axis=-1)
    dvalid = depth > 0.0

    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < 5 or w < 5:
        return normals, valid

    c = (slice(2, h - 2), slice(2, w - 2))
    zc = depth[c]
    gap = gap_abs + gap_rel * zc

    def shifted(dv, du):
        return (slice(2 + dv, h - 2 + dv), slice(2 + du, w - 2 + du))

    ok = dvalid[c].copy()
    nbrs = {}
    for name, (dv, du) in {"l": (0, -2), "r": (0, 2), "u": (-2, 0), "d": (2, 0)}.items():
        s = shifted(dv, du)
        nbrs[name] = pts[s]
        ok &= dvalid[s]
    ok &= np.abs(nbrs["l"][..., 2] + nbrs["r"][..., 2] - 2 * zc) <= gap
    ok &= np.abs(nbrs["u"][..., 2] + nbrs["d"][..., 2] - 2 * zc) <= gap

    tu = nbrs["r"] - nbrs["l"]
    tv = nbrs["d"] - nbrs["u"]
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = np.where(ok[..., None], n / np.where(norm > 1e-12, norm, 1.0)[..., None], 0.0)
    # orient toward the camera
    flip = np.sum(n * pts[c], axis=-1) > 0.0
    n = np.where(flip[..., None], -n, n)

    normals[c] = n
    valid[c] = ok
    return normals, valid


def raycast(rot, origin, fx, fy, cx, cy, width, height, rects, holes, max_depth):
    """Cast one ray per pixel against a set of rectangles with optional holes.

    rects: (r, 11) rows [ox oy oz  e1x e1y e1z  e2x e2y e2z  len1 len2]
    with e1, e2 unit and orthogonal.  holes: (m, 5) rows
    [rect_index s1min s1max s2min s2max] in the rect's local coordinates.

    Returns (depth (h, w), rect_id (h, w) int32, s1 (h, w), s2 (h, w)).
    Depth is the camera-z distance (the pixel ray is parameterized so its
    camera z component is 1); 0 marks no hit within max_depth.  Ties on
    coincident rectangles resolve to the lowest rect index.
    """
    rot = np.asarray(rot, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    dx = (u[None, :] - cx) / fx
    dy = (v[:, None] - cy) / fy
    dirs = np.empty((height, width, 3))
    dirs[..., 0] = dx
    dirs[..., 1] = dy
    dirs[..., 2] = 1.0
    dirs = dirs @ rot.T

    best_t = np.full((height, width), np.inf)
    best_id = np.full((height, width), -1, dtype=np.int32)
    best_s1 = np.zeros((height, width))
    best_s2 = np.zeros((height, width))

    for i in range(rects.shape[0]):
        o = rects[i, 0:3]
        e1 = rects[i, 3:6]
        e2 = rects[i, 6:9]
        l1, l2 = rects[i, 9], rects[i, 10]
        n = np.cross(e1, e2)
        denom = dirs @ n
        num = (o - origin) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        hit = (t > 1e-9) & (t < best_t) & (t <= max_depth)
        if not hit.any():
            continue
        p = origin + t[..., None] * dirs
        rel = p - o
        s1 = rel @ e1
        s2 = rel @ e2
        hit &= (s1 >= 0.0) & (s1 <= l1) & (s2 >= 0.0) & (s2 <= l2)
        for j in range(holes.shape[0]):
            if int(holes[j, 0]) != i:
                continue
            in_hole = (
                (s1 > holes[j, 1]) & (s1 < holes[j, 2]) & (s2 > holes[j, 3]) & (s2 < holes[j, 4])
            )
            hit &= ~in_hole
        best_t = np.where(hit, t, best_t)
        best_id = np.where(hit, np.int32(i), best_id)
        best_s1 = np.where(hit, s1, best_s1)
        best_s2 = np.where(hit, s2, best_s2)

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return depth, best_id, best_s1, best_s2


def farthest_point_order(xy, k, start=0):
    """Indices of k points chosen by farthest-point traversal of (n, 2) xy."""
    xy = np.asarray(xy, dtype=np.float64)
    n = xy.shape[0]
    k = min(k, n)
    order = np.empty(k, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = start
    for i in range(k):
        order[i] = cur
        d = np.sum((xy - xy[cur]) ** 2, axis=1)
        dist = np.minimum(dist, d)
        cur = int(np.argmax(dist))
    return order
