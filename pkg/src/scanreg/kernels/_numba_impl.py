"""Numba-jitted twins of the kernels in _numpy_impl.py."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def depth_normals(depth, fx, fy, cx, cy, gap_abs=0.01, gap_rel=0.015):
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=np.bool_)
    if h < 5 or w < 5:
        return normals, valid
    for vv in range(2, h - 2):
        for uu in range(2, w - 2):
            zc = depth[vv, uu]
            if zc <= 0.0:
                continue
            gap = gap_abs + gap_rel * zc
            zl = depth[vv, uu - 2]
            zr = depth[vv, uu + 2]
            zu = depth[vv - 2, uu]
            zd = depth[vv + 2, uu]
            if zl <= 0.0 or zr <= 0.0 or zu <= 0.0 or zd <= 0.0:
                continue
            if abs(zl + zr - 2.0 * zc) > gap or abs(zu + zd - 2.0 * zc) > gap:
                continue
            # backprojected neighbors
            lx = (uu - 2 - cx) / fx * zl
            ly = (vv - cy) / fy * zl
            rx = (uu + 2 - cx) / fx * zr
            ry = (vv - cy) / fy * zr
            ux = (uu - cx) / fx * zu
            uy = (vv - 2 - cy) / fy * zu
            dx_ = (uu - cx) / fx * zd
            dy_ = (vv + 2 - cy) / fy * zd
            tux = rx - lx
            tuy = ry - ly
            tuz = zr - zl
            tvx = dx_ - ux
            tvy = dy_ - uy
            tvz = zd - zu
            nx = tuy * tvz - tuz * tvy
            ny = tuz * tvx - tux * tvz
            nz = tux * tvy - tuy * tvx
            norm = np.sqrt(nx * nx + ny * ny + nz * nz)
            if norm <= 1e-12:
                continue
            nx /= norm
            ny /= norm
            nz /= norm
            px = (uu - cx) / fx * zc
            py = (vv - cy) / fy * zc
            if nx * px + ny * py + nz * zc > 0.0:
                nx, ny, nz = -nx, -ny, -nz
            normals[vv, uu, 0] = nx
            normals[vv, uu, 1] = ny
            normals[vv, uu, 2] = nz
            valid[vv, uu] = True
    return normals, valid


@njit(cache=True)
def raycast(rot, origin, fx, fy, cx, cy, width, height, rects, holes, max_depth):
    depth = np.zeros((height, width))
    rect_id = np.full((height, width), -1, dtype=np.int32)
    s1_out = np.zeros((height, width))
    s2_out = np.zeros((height, width))
    nrects = rects.shape[0]
    normals = np.empty((nrects, 3))
    for i in range(nrects):
        e1 = rects[i, 3:6]
        e2 = rects[i, 6:9]
        normals[i, 0] = e1[1] * e2[2] - e1[2] * e2[1]
        normals[i, 1] = e1[2] * e2[0] - e1[0] * e2[2]
        normals[i, 2] = e1[0] * e2[1] - e1[1] * e2[0]
    for vv in range(height):
        dy = (vv - cy) / fy
        for uu in range(width):
            dx = (uu - cx) / fx
            wx = rot[0, 0] * dx + rot[0, 1] * dy + rot[0, 2]
            wy = rot[1, 0] * dx + rot[1, 1] * dy + rot[1, 2]
            wz = rot[2, 0] * dx + rot[2, 1] * dy + rot[2, 2]
            best_t = np.inf
            best_i = -1
            best_s1 = 0.0
            best_s2 = 0.0
            for i in range(nrects):
                nx, ny, nz = normals[i, 0], normals[i, 1], normals[i, 2]
                denom = wx * nx + wy * ny + wz * nz
                if abs(denom) <= 1e-12:
                    continue
                num = (
                    (rects[i, 0] - origin[0]) * nx
                    + (rects[i, 1] - origin[1]) * ny
                    + (rects[i, 2] - origin[2]) * nz
                )
                t = num / denom
                if t <= 1e-9 or t >= best_t or t > max_depth:
                    continue
                relx = origin[0] + t * wx - rects[i, 0]
                rely = origin[1] + t * wy - rects[i, 1]
                relz = origin[2] + t * wz - rects[i, 2]
                s1 = relx * rects[i, 3] + rely * rects[i, 4] + relz * rects[i, 5]
                if s1 < 0.0 or s1 > rects[i, 9]:
                    continue
                s2 = relx * rects[i, 6] + rely * rects[i, 7] + relz * rects[i, 8]
                if s2 < 0.0 or s2 > rects[i, 10]:
                    continue
                in_hole = False
                for j in range(holes.shape[0]):
                    if int(holes[j, 0]) != i:
                        continue
                    if holes[j, 1] < s1 < holes[j, 2] and holes[j, 3] < s2 < holes[j, 4]:
                        in_hole = True
                        break
                if in_hole:
                    continue
                best_t = t
                best_i = i
                best_s1 = s1
                best_s2 = s2
            if best_i >= 0:
                depth[vv, uu] = best_t
                rect_id[vv, uu] = best_i
                s1_out[vv, uu] = best_s1
                s2_out[vv, uu] = best_s2
    return depth, rect_id, s1_out, s2_out


@njit(cache=True)
def farthest_point_order(xy, k, start=0):
    n = xy.shape[0]
    if k > n:
        k = n
    order = np.empty(k, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = start
    for i in range(k):
        order[i] = cur
        for j in range(n):
            dx = xy[j, 0] - xy[cur, 0]
            dy = xy[j, 1] - xy[cur, 1]
            d = dx * dx + dy * dy
            if d < dist[j]:
                dist[j] = d
        best = -1.0
        nxt = 0
        for j in range(n):
            if dist[j] > best:
                best = dist[j]
                nxt = j
        cur = nxt
    return order
