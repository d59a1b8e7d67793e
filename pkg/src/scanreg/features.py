"""Per-frame measurement primitives: planar patches, edge features, keypoints.

Patches come from agglomerative clustering of 8x8-pixel seed cells and double
as the leaf planar proxies of the structural model.  Features are the match
candidates for correspondence constraints: interior samples of patches plus
linear edges at depth contours and normal creases.  Keypoints (Harris corners
with a small gradient-histogram descriptor) feed the pairwise aligner only.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .geom import Plane
from .ingest.backproject import backproject_grid
from .ingest.frames import DepthFrame

KIND_PLANAR = 0
KIND_CREASE = 1
KIND_CONTOUR = 2
KIND_NAMES = {KIND_PLANAR: "planar", KIND_CREASE: "crease_edge", KIND_CONTOUR: "contour_edge"}

CACHE_VERSION = 1


class KeypointsUnavailable(RuntimeError):
    """Raised when a frame has no gray channel to detect keypoints in."""


@dataclass(frozen=True)
class FeatureConfig:
    cell_size: int = 8
    normal_tol_deg: float = 15.0
    rms_tol: float = 0.02
    min_patch_pixels: int = 500
    planar_stride: int = 10
    depth_jump: float = 0.1
    crease_angle_deg: float = 30.0
    max_features: int = 1000
    min_pixel_spacing: int = 3
    harris_k: float = 0.04
    harris_nms_radius: int = 8
    max_keypoints: int = 500


@dataclass
class PlanarPatch:
    plane: Plane  # camera space, normal toward the camera
    inlier_count: int
    frame: int


@dataclass
class FrameFeatures:
    """Struct-of-arrays feature set for one frame (camera space)."""

    frame: int
    kinds: np.ndarray  # (n,) uint8
    positions: np.ndarray  # (n, 3)
    directions: np.ndarray  # (n, 3) unit: patch normal or edge tangent
    pixels: np.ndarray  # (n, 2) int (u, v)
    patch_ids: np.ndarray  # (n,) int32 source patch, -1 for edges

    def __len__(self) -> int:
        return self.kinds.shape[0]


@dataclass
class Keypoints:
    frame: int
    positions: np.ndarray  # (n, 3) camera space
    descriptors: np.ndarray  # (n, d) L2-normalized
    pixels: np.ndarray  # (n, 2)

    def __len__(self) -> int:
        return self.positions.shape[0]


class _ClusterStats:
    """Incremental second-moment statistics of a pixel set."""

    __slots__ = ("n", "s", "m", "cells")

    def __init__(self, pts: np.ndarray, cells: set):
        self.n = pts.shape[0]
        self.s = pts.sum(axis=0)
        self.m = pts.T @ pts
        self.cells = cells

    def merged(self, other: "_ClusterStats") -> "_ClusterStats":
        out = object.__new__(_ClusterStats)
        out.n = self.n + other.n
        out.s = self.s + other.s
        out.m = self.m + other.m
        out.cells = None
        return out

    def fit(self):
        """(normal, centroid, rms) least-squares plane of the member pixels."""
        c = self.s / self.n
        cov = self.m / self.n - np.outer(c, c)
        w, v = np.linalg.eigh(cov)
        rms = float(np.sqrt(max(w[0], 0.0)))
        return v[:, 0], c, rms


def _seed_cells(pts, valid, cfg):
    h, w = valid.shape
    cs = cfg.cell_size
    cells = {}
    min_valid = max(6, (cs * cs) * 3 // 8)
    for ci in range(h // cs):
        for cj in range(w // cs):
            sl = (slice(ci * cs, (ci + 1) * cs), slice(cj * cs, (cj + 1) * cs))
            mask = valid[sl]
            if mask.sum() < min_valid:
                continue
            p = pts[sl][mask]
            stats = _ClusterStats(p, {(ci, cj)})
            _, _, rms = stats.fit()
            if rms < cfg.rms_tol:
                cells[(ci, cj)] = stats
    return cells


def _merge_cells(cells, cfg):
    """Best-first agglomerative merging of adjacent cell clusters."""
    ids = {key: i for i, key in enumerate(sorted(cells))}
    stats = {ids[k]: v for k, v in cells.items()}
    fits = {i: s.fit() for i, s in stats.items()}
    neighbors = {i: set() for i in stats}
    for (ci, cj), i in ids.items():
        for d in ((ci + 1, cj), (ci, cj + 1)):
            if d in ids:
                neighbors[i].add(ids[d])
                neighbors[ids[d]].add(i)
    version = {i: 0 for i in stats}
    cos_tol = np.cos(np.deg2rad(cfg.normal_tol_deg))

    def propose(a, b):
        merged = stats[a].merged(stats[b])
        n, c, rms = merged.fit()
        if rms >= cfg.rms_tol:
            return None
        for other in (a, b):
            if abs(float(n @ fits[other][0])) < cos_tol:
                return None
        return rms, merged, (n, c, rms)

    heap = []
    for a in sorted(stats):
        for b in sorted(neighbors[a]):
            if a < b:
                prop = propose(a, b)
                if prop is not None:
                    heapq.heappush(heap, (prop[0], a, b, version[a], version[b]))

    next_id = max(stats) + 1 if stats else 0
    while heap:
        cost, a, b, va, vb = heapq.heappop(heap)
        if a not in stats or b not in stats or version[a] != va or version[b] != vb:
            continue
        prop = propose(a, b)
        if prop is None:
            continue
        _, merged, fit = prop
        merged.cells = stats[a].cells | stats[b].cells
        new = next_id
        next_id += 1
        stats[new] = merged
        fits[new] = fit
        version[new] = 0
        neighbors[new] = (neighbors[a] | neighbors[b]) - {a, b}
        for i in (a, b):
            del stats[i], fits[i], neighbors[i], version[i]
        for other in sorted(neighbors[new]):
            neighbors[other].discard(a)
            neighbors[other].discard(b)
            neighbors[other].add(new)
            lo, hi = min(new, other), max(new, other)
            prop2 = propose(lo, hi)
            if prop2 is not None:
                heapq.heappush(heap, (prop2[0], lo, hi, version[lo], version[hi]))
    return stats, fits


def _patches_with_labels(frame: DepthFrame, grid, cfg: FeatureConfig):
    pts, normals, valid = grid
    cells = _seed_cells(pts, valid, cfg)
    stats, fits = _merge_cells(cells, cfg)

    patches = []
    labels = np.full(frame.depth.shape, -1, dtype=np.int32)
    cs = cfg.cell_size
    # stable output order: by the smallest member cell coordinate
    order = sorted(stats, key=lambda i: min(stats[i].cells))
    for i in order:
        if stats[i].n < cfg.min_patch_pixels:
            continue
        n, c, _ = fits[i]
        if float(n @ c) > 0:
            n = -n
        idx = len(patches)
        patches.append(PlanarPatch(plane=Plane(n, c), inlier_count=int(stats[i].n), frame=frame.index))
        for ci, cj in stats[i].cells:
            sl = (slice(ci * cs, (ci + 1) * cs), slice(cj * cs, (cj + 1) * cs))
            labels[sl][valid[sl]] = idx
    return patches, labels


def extract_planar_patches(frame: DepthFrame, cfg: FeatureConfig = FeatureConfig()):
    """Agglomerative planar segmentation of one depth frame."""
    grid = backproject_grid(frame)
    patches, _ = _patches_with_labels(frame, grid, cfg)
    return patches


def _spacing_filter(pixels: np.ndarray, min_spacing: int) -> np.ndarray:
    """Greedy acceptance in scan order; rejects pixels near an accepted one."""
    if pixels.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((pixels[:, 0], pixels[:, 1]))
    taken = {}
    keep = []
    for i in order:
        u, v = int(pixels[i, 0]), int(pixels[i, 1])
        cell = (u // min_spacing, v // min_spacing)
        ok = True
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                for (pu, pv) in taken.get((cell[0] + du, cell[1] + dv), ()):
                    if abs(pu - u) < min_spacing and abs(pv - v) < min_spacing:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            taken.setdefault(cell, []).append((u, v))
            keep.append(i)
    return np.array(sorted(keep), dtype=np.int64)


def _edge_direction(points: np.ndarray) -> np.ndarray | None:
    """Dominant direction of a handful of 3D samples along an edge."""
    if points.shape[0] < 2:
        return None
    c = points.mean(axis=0)
    d = points - c
    cov = d.T @ d
    w, v = np.linalg.eigh(cov)
    if w[2] <= 1e-18:
        return None
    return v[:, 2]


def _edge_candidates(frame, grid, cfg):
    """(contour near-side mask, crease mask, crease directions map)."""
    pts, normals, valid = grid
    depth = frame.depth
    h, w = depth.shape
    dvalid = depth > 0

    contour = np.zeros((h, w), dtype=bool)
    for axis, sl_a, sl_b in (
        (1, (slice(None), slice(0, w - 1)), (slice(None), slice(1, w))),
        (0, (slice(0, h - 1), slice(None)), (slice(1, h), slice(None))),
    ):
        both = dvalid[sl_a] & dvalid[sl_b]
        jump = np.abs(depth[sl_a] - depth[sl_b]) > cfg.depth_jump
        near_a = depth[sl_a] < depth[sl_b]
        m = both & jump
        contour[sl_a] |= m & near_a
        contour[sl_b] |= m & ~near_a
    contour &= dvalid

    # Normals from the 5x5 support blend within +/-2 px of a crease, so the
    # bend test compares normals one support radius apart and marks the
    # center pixel.
    crease = np.zeros((h, w), dtype=bool)
    crease_dir = np.zeros((h, w, 3))
    cos_tol = np.cos(np.deg2rad(cfg.crease_angle_deg))
    r = 2
    for sl_a, sl_c, sl_b in (
        (
            (slice(None), slice(0, w - 2 * r)),
            (slice(None), slice(r, w - r)),
            (slice(None), slice(2 * r, w)),
        ),
        (
            (slice(0, h - 2 * r), slice(None)),
            (slice(r, h - r), slice(None)),
            (slice(2 * r, h), slice(None)),
        ),
    ):
        both = valid[sl_a] & valid[sl_b] & dvalid[sl_c]
        dot = np.sum(normals[sl_a] * normals[sl_b], axis=-1)
        bend = both & (dot < cos_tol)
        cr = np.cross(normals[sl_a], normals[sl_b])
        nrm = np.linalg.norm(cr, axis=-1, keepdims=True)
        cr = np.where(nrm > 1e-12, cr / np.where(nrm > 0, nrm, 1.0), 0.0)
        sel = bend & ~crease[sl_c]
        crease_dir[sl_c] = np.where(sel[..., None], cr, crease_dir[sl_c])
        crease[sl_c] |= bend
    crease &= ~contour
    return contour, crease, crease_dir


def extract_features(
    frame: DepthFrame, cfg: FeatureConfig = FeatureConfig(), patches=None, grid=None
) -> FrameFeatures:
    """All match candidates of one frame, capped by farthest-point sampling."""
    if grid is None:
        grid = backproject_grid(frame)
    pts, normals, valid = grid
    if patches is None:
        patches, labels = _patches_with_labels(frame, grid, cfg)
    else:
        patches, labels = patches

    kinds, positions, directions, pixels, patch_ids = [], [], [], [], []

    # planar samples on a fixed pixel grid inside patch interiors
    stride = cfg.planar_stride
    vs, us = np.nonzero(labels >= 0)
    on_grid = (vs % stride == 0) & (us % stride == 0)
    for v, u in zip(vs[on_grid], us[on_grid]):
        pid = labels[v, u]
        kinds.append(KIND_PLANAR)
        positions.append(pts[v, u])
        directions.append(patches[pid].plane.normal)
        pixels.append((u, v))
        patch_ids.append(pid)

    contour, crease, crease_dir = _edge_candidates(frame, grid, cfg)

    def add_edges(mask, kind, dir_map=None):
        evs, eus = np.nonzero(mask)
        pix = np.stack([eus, evs], axis=1)
        keep = _spacing_filter(pix, cfg.min_pixel_spacing)
        for i in keep:
            u, v = int(pix[i, 0]), int(pix[i, 1])
            if dir_map is not None:
                d = dir_map[v, u]
                if np.linalg.norm(d) < 0.5:
                    continue
            else:
                # tangent from nearby mask pixels in a 5x5 window
                v0, v1 = max(0, v - 2), min(mask.shape[0], v + 3)
                u0, u1 = max(0, u - 2), min(mask.shape[1], u + 3)
                lvs, lus = np.nonzero(mask[v0:v1, u0:u1])
                d = _edge_direction(pts[v0 + lvs, u0 + lus])
                if d is None:
                    continue
            kinds.append(kind)
            positions.append(pts[v, u])
            directions.append(d)
            pixels.append((u, v))
            patch_ids.append(-1)

    add_edges(contour, KIND_CONTOUR)
    add_edges(crease, KIND_CREASE, crease_dir)

    if not kinds:
        return FrameFeatures(
            frame=frame.index,
            kinds=np.zeros(0, dtype=np.uint8),
            positions=np.zeros((0, 3)),
            directions=np.zeros((0, 3)),
            pixels=np.zeros((0, 2), dtype=np.int64),
            patch_ids=np.zeros(0, dtype=np.int32),
        )

    kinds = np.array(kinds, dtype=np.uint8)
    positions = np.array(positions)
    directions = np.array(directions)
    pixels = np.array(pixels, dtype=np.int64)
    patch_ids = np.array(patch_ids, dtype=np.int32)

    if len(kinds) > cfg.max_features:
        sel = kernels.farthest_point_order(pixels.astype(np.float64), cfg.max_features, 0)
        sel = np.sort(sel)
        kinds, positions, directions = kinds[sel], positions[sel], directions[sel]
        pixels, patch_ids = pixels[sel], patch_ids[sel]

    return FrameFeatures(
        frame=frame.index,
        kinds=kinds,
        positions=positions,
        directions=directions,
        pixels=pixels,
        patch_ids=patch_ids,
    )


def detect_keypoints(frame: DepthFrame, cfg: FeatureConfig = FeatureConfig()) -> Keypoints:
    """Harris corners on the gray channel, backprojected through depth."""
    if frame.gray is None:
        raise KeypointsUnavailable(f"frame {frame.index} has no gray channel")
    gray = frame.gray.astype(np.float64)
    iy, ix = np.gradient(gray)
    ixx = ndimage.gaussian_filter(ix * ix, 1.5)
    iyy = ndimage.gaussian_filter(iy * iy, 1.5)
    ixy = ndimage.gaussian_filter(ix * iy, 1.5)
    resp = ixx * iyy - ixy * ixy - cfg.harris_k * (ixx + iyy) ** 2

    r = cfg.harris_nms_radius
    local_max = ndimage.maximum_filter(resp, size=2 * r + 1, mode="constant", cval=-np.inf)
    peak = (resp == local_max) & (resp > max(resp.max(), 0.0) * 0.01)
    vs, us = np.nonzero(peak)
    if vs.size == 0:
        return Keypoints(frame.index, np.zeros((0, 3)), np.zeros((0, 64)), np.zeros((0, 2), dtype=np.int64))
    order = np.argsort(-resp[vs, us], kind="stable")[: cfg.max_keypoints]
    vs, us = vs[order], us[order]

    intr = frame.intrinsics
    mag = np.hypot(ix, iy)
    ang = np.arctan2(iy, ix)  # [-pi, pi)
    obin = np.clip(((ang + np.pi) / (2 * np.pi) * 4).astype(int), 0, 3)

    positions, descriptors, pixels = [], [], []
    h, w = gray.shape
    for v, u in zip(vs, us):
        z = frame.depth[v, u]
        if z <= 0:
            continue  # pruned: no valid depth
        if not (8 <= u < w - 8 and 8 <= v < h - 8):
            continue
        desc = np.zeros((4, 4, 4))
        pm = mag[v - 8 : v + 8, u - 8 : u + 8]
        pb = obin[v - 8 : v + 8, u - 8 : u + 8]
        for si in range(4):
            for sj in range(4):
                cm = pm[si * 4 : si * 4 + 4, sj * 4 : sj * 4 + 4]
                cb = pb[si * 4 : si * 4 + 4, sj * 4 : sj * 4 + 4]
                for b in range(4):
                    desc[si, sj, b] = cm[cb == b].sum()
        d = desc.ravel()
        norm = np.linalg.norm(d)
        if norm <= 0:
            continue
        positions.append([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z])
        descriptors.append(d / norm)
        pixels.append((u, v))

    if not positions:
        return Keypoints(frame.index, np.zeros((0, 3)), np.zeros((0, 64)), np.zeros((0, 2), dtype=np.int64))
    return Keypoints(
        frame=frame.index,
        positions=np.array(positions),
        descriptors=np.array(descriptors),
        pixels=np.array(pixels, dtype=np.int64),
    )


def extract_frame(frame: DepthFrame, cfg: FeatureConfig = FeatureConfig()):
    """(patches, features) computed off a shared backprojection."""
    grid = backproject_grid(frame)
    patches, labels = _patches_with_labels(frame, grid, cfg)
    feats = extract_features(frame, cfg, patches=(patches, labels), grid=grid)
    return patches, feats


def save_feature_cache(path, patches: list[PlanarPatch], feats: FrameFeatures) -> None:
    planes = np.array([[*p.plane.normal, *p.plane.point] for p in patches]).reshape(-1, 6)
    counts = np.array([p.inlier_count for p in patches], dtype=np.int64)
    np.savez_compressed(
        path,
        version=np.array([CACHE_VERSION]),
        frame=np.array([feats.frame]),
        planes=planes,
        counts=counts,
        kinds=feats.kinds,
        positions=feats.positions,
        directions=feats.directions,
        pixels=feats.pixels,
        patch_ids=feats.patch_ids,
    )


def load_feature_cache(path):
    data = np.load(path)
    if int(data["version"][0]) != CACHE_VERSION:
        raise ValueError(f"feature cache {path} has version {data['version'][0]}, want {CACHE_VERSION}")
    frame = int(data["frame"][0])
    patches = [
        PlanarPatch(plane=Plane(row[:3], row[3:]), inlier_count=int(c), frame=frame)
        for row, c in zip(data["planes"], data["counts"])
    ]
    feats = FrameFeatures(
        frame=frame,
        kinds=data["kinds"],
        positions=data["positions"],
        directions=data["directions"],
        pixels=data["pixels"],
        patch_ids=data["patch_ids"],
    )
    return patches, feats
