"""Per-iteration constraint detection inside overlapping frame windows.

Each iteration covers the trajectory with windows of l_i frames overlapping
by half a window.  Within a window, per-frame planar patches (leaf proxies)
are lifted into world coordinates under the current poses and clustered into
parent proxies (coplanarity constraints); parent pairs in the same or
adjacent windows yield weighted parallel/antiparallel/orthogonal relation
constraints; and closest compatible features of sampled frame pairs yield
correspondence constraints under a distance/angle threshold schedule that
tightens with how long the pair has shared a window.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .features import KIND_PLANAR, FrameFeatures, PlanarPatch
from .geom import LAMBDA_NORMAL, Plane, angle_between

CORR_PLANE = 0
CORR_EDGE = 1

RELATION_KINDS = ("parallel", "orthogonal", "antiparallel")
_CANONICAL = {"parallel": 0.0, "orthogonal": np.pi / 2, "antiparallel": np.pi}


@dataclass(frozen=True)
class ConstraintConfig:
    sigma_theta_deg: float = 10.0
    tau_merge: float = 0.01  # m^2
    ramp_iters: int = 4
    dist_start: float = 0.5
    dist_end: float = 0.15
    angle_start_deg: float = 45.0
    angle_end_deg: float = 20.0
    corr_per_frame: int = 100
    random_partners: int = 4


@dataclass(frozen=True)
class Window:
    iteration: int
    index: int
    first_frame: int
    last_frame: int  # inclusive

    @property
    def length(self) -> int:
        return self.last_frame - self.first_frame + 1

    def covers(self, f: int, g: int) -> bool:
        return self.first_frame <= f and g <= self.last_frame


@dataclass
class LeafProxy:
    """A per-frame planar patch in its camera coordinates."""

    id: int
    frame: int
    patch: int
    plane_cam: Plane
    inlier_count: int


@dataclass
class ParentProxy:
    """A coplanar cluster of leaves; its world plane is an optimization
    variable."""

    id: int
    plane: Plane
    children: list[int]
    inlier_count: int
    window: int


@dataclass(frozen=True)
class CoplanarityConstraint:
    parent: int
    child: int


@dataclass(frozen=True)
class RelationConstraint:
    kind: str
    a: int
    b: int
    weight: float


@dataclass
class Correspondences:
    """Column arrays of feature-to-feature matches (same layout per row)."""

    frame_a: np.ndarray
    idx_a: np.ndarray
    frame_b: np.ndarray
    idx_b: np.ndarray
    kind: np.ndarray  # CORR_PLANE or CORR_EDGE
    window: np.ndarray  # creating window index

    def __len__(self) -> int:
        return self.frame_a.shape[0]

    def select(self, sel) -> "Correspondences":
        return Correspondences(
            self.frame_a[sel],
            self.idx_a[sel],
            self.frame_b[sel],
            self.idx_b[sel],
            self.kind[sel],
            self.window[sel],
        )

    @staticmethod
    def empty() -> "Correspondences":
        z = np.zeros(0, dtype=np.int64)
        return Correspondences(z, z.copy(), z.copy(), z.copy(), z.copy(), z.copy())

    @staticmethod
    def from_rows(rows) -> "Correspondences":
        if not rows:
            return Correspondences.empty()
        arr = np.asarray(rows, dtype=np.int64)
        return Correspondences(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], arr[:, 5])


@dataclass
class ProxyFitSamples:
    """Sampled (parent proxy, planar feature) attachments for the fit term."""

    proxy: np.ndarray  # (m,) parent index
    frame: np.ndarray  # (m,)
    idx: np.ndarray  # (m,) feature index within the frame

    def __len__(self) -> int:
        return self.proxy.shape[0]


@dataclass
class ConstraintSet:
    """Everything one refinement iteration feeds the solver."""

    leaves: list[LeafProxy]
    parents: list[ParentProxy]
    coplanarity: list[CoplanarityConstraint]
    relations: list[RelationConstraint]
    correspondences: Correspondences
    proxy_fits: ProxyFitSamples
    iteration: int = 0


def make_windows(n: int, length: int, iteration: int = 0) -> list[Window]:
    """Overlapping windows of `length` frames with half-window stride.

    A single window spans everything once length >= n; otherwise windows
    start at multiples of floor(length/2) and a short final window is added
    if frame n-1 would be uncovered.
    """
    if n < 1 or length < 1:
        raise ValueError(f"need n >= 1 and length >= 1, got {n}, {length}")
    if length >= n:
        return [Window(iteration, 0, 0, n - 1)]
    half = max(1, length // 2)
    windows = []
    start = 0
    while start + length <= n:
        windows.append(Window(iteration, len(windows), start, start + length - 1))
        start += half
    if windows[-1].last_frame < n - 1:
        windows.append(Window(iteration, len(windows), start, n - 1))
    return windows


def _ecp_pairwise(n1, p1, n2, p2, lambda_normal=LAMBDA_NORMAL):
    """Vectorized coplanarity error between two plane sets (broadcast rows)."""
    d = p2 - p1
    r1 = np.einsum("...k,...k->...", d, n1)
    r2 = np.einsum("...k,...k->...", d, n2)
    cr = np.cross(n1, n2)
    return r1**2 + r2**2 + lambda_normal * np.einsum("...k,...k->...", cr, cr)


class _PlaneCluster:
    """Weighted merge state: second moments of normals, mean of points."""

    __slots__ = ("members", "w", "wp", "m_n", "wn")

    def __init__(self, leaf_idx, weight, normal, point):
        self.members = [leaf_idx]
        self.w = weight
        self.wp = weight * point
        self.m_n = weight * np.outer(normal, normal)
        self.wn = weight * normal

    def absorb(self, other):
        self.members += other.members
        self.w += other.w
        self.wp = self.wp + other.wp
        self.m_n = self.m_n + other.m_n
        self.wn = self.wn + other.wn

    def plane(self) -> Plane:
        _, v = np.linalg.eigh(self.m_n)
        n = v[:, 2]
        if float(n @ self.wn) < 0:
            n = -n
        return Plane(n, self.wp / self.w)


def lift_leaves(leaves: list[LeafProxy], poses) -> tuple[np.ndarray, np.ndarray]:
    """World-space (normals, points) of leaf proxies under the given poses."""
    normals = np.empty((len(leaves), 3))
    points = np.empty((len(leaves), 3))
    for i, leaf in enumerate(leaves):
        pose = poses[leaf.frame]
        normals[i] = pose.rotate(leaf.plane_cam.normal)
        points[i] = pose.apply(leaf.plane_cam.point)
    return normals, points


def cluster_coplanar(
    leaves: list[LeafProxy],
    poses,
    cfg: ConstraintConfig = ConstraintConfig(),
    window_index: int = 0,
    id_start: int = 0,
):
    """Agglomerate coplanar leaf proxies into parent proxies.

    Candidate leaf pairs below the merge threshold are processed in
    ascending error order; each merge is validated against the current
    cluster fits, and passes repeat until no merge fires.  Every leaf ends
    up under exactly one parent (singletons included, without coplanarity
    constraints).
    """
    parents: list[ParentProxy] = []
    constraints: list[CoplanarityConstraint] = []
    m = len(leaves)
    if m == 0:
        return parents, constraints

    normals, points = lift_leaves(leaves, poses)
    weights = np.array([leaf.inlier_count for leaf in leaves], dtype=np.float64)

    # candidate pairs below the merge threshold, by initial error
    cand = []
    chunk = 512
    for i0 in range(0, m, chunk):
        i1 = min(i0 + chunk, m)
        block = _ecp_pairwise(
            normals[i0:i1, None, :], points[i0:i1, None, :], normals[None, :, :], points[None, :, :]
        )
        for irow in range(i0, i1):
            js = np.nonzero(block[irow - i0] < cfg.tau_merge)[0]
            for j in js:
                if j > irow:
                    cand.append((block[irow - i0, j], irow, int(j)))
    cand.sort(key=lambda c: (c[0], leaves[c[1]].id, leaves[c[2]].id))

    clusters = {
        i: _PlaneCluster(i, weights[i], normals[i], points[i]) for i in range(m)
    }
    root = list(range(m))

    def find(i):
        while root[i] != i:
            root[i] = root[root[i]]
            i = root[i]
        return i

    changed = True
    while changed:
        changed = False
        for cost, i, j in cand:
            ri, rj = find(i), find(j)
            if ri == rj:
                continue
            a, b = clusters[ri], clusters[rj]
            pa, pb = a.plane(), b.plane()
            e = _ecp_pairwise(pa.normal, pa.point, pb.normal, pb.point)
            if e >= cfg.tau_merge:
                continue
            a.absorb(b)
            del clusters[rj]
            root[rj] = ri
            changed = True

    # stable parent order: by smallest member leaf id
    order = sorted(clusters, key=lambda r: min(leaves[k].id for k in clusters[r].members))
    for pos, r in enumerate(order):
        cluster = clusters[r]
        pid = id_start + pos
        children = sorted(leaves[k].id for k in cluster.members)
        parents.append(
            ParentProxy(
                id=pid,
                plane=cluster.plane(),
                children=children,
                inlier_count=int(round(cluster.w)),
                window=window_index,
            )
        )
        if len(children) >= 2:
            for child in children:
                constraints.append(CoplanarityConstraint(parent=pid, child=child))
    return parents, constraints


def relation_weight(theta: float, kind: str, sigma_theta: float) -> float:
    """Gaussian falloff of a relation's weight around its canonical angle."""
    if kind not in _CANONICAL:
        raise ValueError(f"unknown relation kind {kind!r}")
    delta = theta - _CANONICAL[kind]
    return float(np.exp(-(delta**2) / (2.0 * sigma_theta**2)))


def detect_relations(
    parents: list[ParentProxy], cfg: ConstraintConfig = ConstraintConfig()
) -> list[RelationConstraint]:
    """Typed, weighted relations between parents in the same or adjacent
    windows; emitted only within 3 sigma of a canonical angle."""
    sigma = np.deg2rad(cfg.sigma_theta_deg)
    by_window: dict[int, list[ParentProxy]] = {}
    for p in parents:
        by_window.setdefault(p.window, []).append(p)
    out = []
    pairs = []
    for w, group in sorted(by_window.items()):
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                pairs.append((group[i], group[j]))
        if w + 1 in by_window:
            for a in group:
                for b in by_window[w + 1]:
                    pairs.append((a, b))
    for a, b in pairs:
        theta = angle_between(a.plane.normal, b.plane.normal)
        kind = min(RELATION_KINDS, key=lambda k: abs(theta - _CANONICAL[k]))
        if abs(theta - _CANONICAL[kind]) < 3.0 * sigma:
            out.append(
                RelationConstraint(kind=kind, a=a.id, b=b.id, weight=relation_weight(theta, kind, sigma))
            )
    return out


def threshold_schedule(pair_age: int, cfg: ConstraintConfig = ConstraintConfig()):
    """(max distance m, max angle deg) for a pair that has shared a window
    for `pair_age` iterations; ramps linearly from the loose start values
    down to the tight end values."""
    if pair_age < 0:
        raise ValueError("pair_age must be >= 0")
    t = min(pair_age / cfg.ramp_iters, 1.0) if cfg.ramp_iters > 0 else 1.0
    dist = (1.0 - t) * cfg.dist_start + t * cfg.dist_end
    angle = (1.0 - t) * cfg.angle_start_deg + t * cfg.angle_end_deg
    return dist, angle


def first_shared_iteration(f: int, g: int, windows_by_iteration: list[list[Window]]) -> int | None:
    """Earliest iteration at which frames f <= g co-occupied a window."""
    for i, windows in enumerate(windows_by_iteration):
        for w in windows:
            if w.covers(f, g):
                return i
    return None


class _WorldFeatures:
    """Per-frame world-space feature positions/directions with KD-trees."""

    def __init__(self, features: list[FrameFeatures], poses):
        self.features = features
        self.poses = poses
        self.positions: dict[int, np.ndarray] = {}
        self.directions: dict[int, np.ndarray] = {}
        self.trees: dict[tuple[int, int], tuple[cKDTree, np.ndarray]] = {}

    def world(self, f: int):
        if f not in self.positions:
            pose = self.poses[f]
            self.positions[f] = pose.apply(self.features[f].positions)
            self.directions[f] = pose.rotate(self.features[f].directions)
        return self.positions[f], self.directions[f]

    def tree(self, f: int, kind: int):
        key = (f, kind)
        if key not in self.trees:
            pos, _ = self.world(f)
            sel = np.nonzero(self.features[f].kinds == kind)[0]
            tree = cKDTree(pos[sel]) if sel.size else None
            self.trees[key] = (tree, sel)
        return self.trees[key]


def _sample_frame_pairs(windows: list[Window], cfg: ConstraintConfig, rng) -> dict:
    """{(f, g): window index} pairs to match, multi-scale plus random."""
    pairs: dict[tuple[int, int], int] = {}
    for w in windows:
        length = w.length
        offsets = []
        o = 1
        while o < length:
            offsets.append(o)
            o *= 2
        for f in range(w.first_frame, w.last_frame + 1):
            for o in offsets:
                g = f + o
                if g <= w.last_frame and (f, g) not in pairs:
                    pairs[(f, g)] = w.index
            if f < w.last_frame:
                extra = rng.integers(f + 1, w.last_frame + 1, size=cfg.random_partners)
                for g in extra:
                    g = int(g)
                    if (f, g) not in pairs:
                        pairs[(f, g)] = w.index
    return pairs


def find_correspondences(
    features: list[FrameFeatures],
    windows: list[Window],
    poses,
    windows_by_iteration: list[list[Window]],
    iteration: int,
    cfg: ConstraintConfig = ConstraintConfig(),
    seed: int = 0,
) -> Correspondences:
    """Closest compatible mutual-nearest feature matches for sampled frame
    pairs in every window, thresholded by each pair's age."""
    rng = np.random.default_rng([seed, 23, iteration])
    pairs = _sample_frame_pairs(windows, cfg, rng)
    world = _WorldFeatures(features, poses)
    rows = []
    for (f, g), widx in sorted(pairs.items()):
        first = first_shared_iteration(f, g, windows_by_iteration)
        age = iteration - first if first is not None else 0
        max_dist, max_angle_deg = threshold_schedule(age, cfg)
        cos_tol = np.cos(np.deg2rad(max_angle_deg))
        pos_f, dir_f = world.world(f)
        pos_g, dir_g = world.world(g)
        for kind in np.intersect1d(np.unique(features[f].kinds), np.unique(features[g].kinds)):
            kind = int(kind)
            tree_g, sel_g = world.tree(g, kind)
            tree_f, sel_f = world.tree(f, kind)
            if tree_g is None or tree_f is None:
                continue
            dist, nn = tree_g.query(pos_f[sel_f], distance_upper_bound=max_dist)
            ok = np.isfinite(dist)
            if not ok.any():
                continue
            ia = np.nonzero(ok)[0]
            ib = nn[ok]
            # mutual nearest
            back_dist, back = tree_f.query(pos_g[sel_g[ib]])
            mutual = back == ia
            ia, ib = ia[mutual], ib[mutual]
            if ia.size == 0:
                continue
            da = dir_f[sel_f[ia]]
            db = dir_g[sel_g[ib]]
            cos = np.einsum("ij,ij->i", da, db)
            if kind == KIND_PLANAR:
                keep = cos >= cos_tol
                ckind = CORR_PLANE
            else:
                keep = np.abs(cos) >= cos_tol
                ckind = CORR_EDGE
            for i, j in zip(ia[keep], ib[keep]):
                rows.append((f, int(sel_f[i]), g, int(sel_g[j]), ckind, widx))
    return Correspondences.from_rows(rows)


def largest_remainder_allocation(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation proportional to weights summing exactly to total."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0 or weights.sum() <= 0:
        return np.zeros(weights.size, dtype=np.int64)
    quota = weights / weights.sum() * total
    alloc = np.floor(quota).astype(np.int64)
    short = total - int(alloc.sum())
    if short > 0:
        frac = quota - alloc
        order = np.lexsort((np.arange(weights.size), -frac))
        alloc[order[:short]] += 1
    return alloc


def subsample_correspondences(
    corr: Correspondences, n_frames: int, seed: int = 0, per_frame: int = 100
) -> Correspondences:
    """Cap matches at per_frame * n, stratified by creating window."""
    cap = per_frame * n_frames
    if len(corr) <= cap:
        return corr
    windows, counts = np.unique(corr.window, return_counts=True)
    alloc = largest_remainder_allocation(counts.astype(np.float64), cap)
    rng = np.random.default_rng([seed, 29])
    keep = []
    for w, take in zip(windows, alloc):
        idx = np.nonzero(corr.window == w)[0]
        if take >= idx.size:
            keep.append(idx)
        else:
            keep.append(rng.choice(idx, size=int(take), replace=False))
    sel = np.sort(np.concatenate(keep))
    return corr.select(sel)


def sample_proxy_fits(
    parents: list[ParentProxy],
    leaves: list[LeafProxy],
    features: list[FrameFeatures],
    n_frames: int,
    seed: int = 0,
    per_frame: int = 100,
) -> ProxyFitSamples:
    """Draw planar features per parent, proportional to its inlier count."""
    leaf_by_id = {leaf.id: leaf for leaf in leaves}
    pools = []
    for p in parents:
        rows = []
        for child in p.children:
            leaf = leaf_by_id[child]
            ff = features[leaf.frame]
            sel = np.nonzero((ff.kinds == KIND_PLANAR) & (ff.patch_ids == leaf.patch))[0]
            rows.extend((leaf.frame, int(s)) for s in sel)
        pools.append(rows)
    alloc = largest_remainder_allocation(
        np.array([p.inlier_count for p in parents], dtype=np.float64), per_frame * n_frames
    )
    rng = np.random.default_rng([seed, 31])
    proxy, frame, idx = [], [], []
    for pi, (pool, take) in enumerate(zip(pools, alloc)):
        if not pool:
            continue
        take = int(min(take, len(pool)))
        chosen = rng.choice(len(pool), size=take, replace=False) if take < len(pool) else np.arange(len(pool))
        for c in np.sort(chosen):
            proxy.append(pi)
            frame.append(pool[c][0])
            idx.append(pool[c][1])
    return ProxyFitSamples(
        proxy=np.array(proxy, dtype=np.int64),
        frame=np.array(frame, dtype=np.int64),
        idx=np.array(idx, dtype=np.int64),
    )


def leaves_from_patches(patches_per_frame: list[list[PlanarPatch]]) -> list[LeafProxy]:
    """Flatten per-frame patches into leaf proxies with stable global ids."""
    leaves = []
    for f, patches in enumerate(patches_per_frame):
        for k, patch in enumerate(patches):
            leaves.append(
                LeafProxy(
                    id=len(leaves),
                    frame=f,
                    patch=k,
                    plane_cam=patch.plane,
                    inlier_count=patch.inlier_count,
                )
            )
    return leaves


def dump_constraints(path, cset: ConstraintSet) -> None:
    """Debug/ablation dump: one JSON object per constraint."""
    with open(path, "w") as f:
        for p in cset.parents:
            f.write(
                json.dumps(
                    {
                        "type": "proxy",
                        "id": p.id,
                        "window": p.window,
                        "normal": [float(x) for x in p.plane.normal],
                        "point": [float(x) for x in p.plane.point],
                        "children": p.children,
                        "inliers": p.inlier_count,
                        "iteration": cset.iteration,
                    }
                )
                + "\n"
            )
        for c in cset.coplanarity:
            f.write(
                json.dumps(
                    {"type": "coplanarity", "parent": c.parent, "child": c.child, "iteration": cset.iteration}
                )
                + "\n"
            )
        for r in cset.relations:
            f.write(
                json.dumps(
                    {
                        "type": "relation",
                        "kind": r.kind,
                        "a": r.a,
                        "b": r.b,
                        "weight": r.weight,
                        "iteration": cset.iteration,
                    }
                )
                + "\n"
            )
        corr = cset.correspondences
        for i in range(len(corr)):
            f.write(
                json.dumps(
                    {
                        "type": "correspondence",
                        "kind": "plane" if corr.kind[i] == CORR_PLANE else "edge",
                        "frame_a": int(corr.frame_a[i]),
                        "idx_a": int(corr.idx_a[i]),
                        "frame_b": int(corr.frame_b[i]),
                        "idx_b": int(corr.idx_b[i]),
                        "window": int(corr.window[i]),
                        "iteration": cset.iteration,
                    }
                )
                + "\n"
            )
