"""Sparse nonlinear least squares over camera poses and proxy planes.

The energy is a weighted sum of residual families:

    structural   (s): proxy-to-child coplanarity (h), proxy pair relations
                      (g), and proxy-to-feature fits (p)
    correspondence (c): point-to-plane rows for planar matches, cross-product
                      rows for edge matches
    anchors      (l): misalignment of current vs initial relative transforms
                      at strides 1, 2, 4, 8, 16
    inertia      (i): damping toward the previous iteration's parameters
    points       (pt): point-to-point rows (benchmark lower bound only)

Every family has an analytic Jacobian; minimization is Levenberg-Marquardt
on the stacked weighted residuals with a sparse normal-equation solve.
Pose 0 (or any pose marked fixed) is held constant to remove the gauge
freedom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix, diags, vstack
from scipy.sparse.linalg import spsolve

from .constraints import CORR_EDGE, CORR_PLANE, ConstraintSet
from .geom import LAMBDA_NORMAL, LAMBDA_ROTATION, rotation_derivatives, rotation_matrices

FAMILIES = ("h", "g", "p", "c", "l", "i", "pt")


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnergyWeights:
    w_s: float = 1.0
    w_p: float = 1.0
    w_h: float = 1.0
    w_g: float = 0.5
    w_c: float = 1.0
    w_l: float = 2.0
    w_i: float = 0.01
    w_pt: float = 1.0

    def __post_init__(self):
        for name in ("w_s", "w_p", "w_h", "w_g", "w_c", "w_l", "w_pt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.w_i <= 0:
            raise ValueError("w_i must be > 0 (keeps the system constrained)")

    def family_multiplier(self, family: str) -> float:
        return {
            "h": self.w_s * self.w_h,
            "g": self.w_s * self.w_g,
            "p": self.w_s * self.w_p,
            "c": self.w_c,
            "l": self.w_l,
            "i": self.w_i,
            "pt": self.w_pt,
        }[family]


@dataclass
class EnergyBreakdown:
    terms: dict
    weighted_total: float

    def __getitem__(self, family: str) -> float:
        return self.terms[family]


@dataclass
class ParameterState:
    """poses: (n, 6) rows [ex ey ez tx ty tz]; proxies: (p, 6) rows
    [nx ny nz px py pz].  fixed marks gauge-locked poses."""

    poses: np.ndarray
    proxies: np.ndarray
    fixed: np.ndarray

    def copy(self) -> "ParameterState":
        return ParameterState(self.poses.copy(), self.proxies.copy(), self.fixed.copy())

    @property
    def n_poses(self) -> int:
        return self.poses.shape[0]

    @property
    def n_proxies(self) -> int:
        return self.proxies.shape[0]


def make_state(poses6: np.ndarray, proxies6: np.ndarray | None = None, fixed=None) -> ParameterState:
    poses6 = np.asarray(poses6, dtype=np.float64).reshape(-1, 6).copy()
    proxies6 = (
        np.zeros((0, 6)) if proxies6 is None else np.asarray(proxies6, dtype=np.float64).reshape(-1, 6).copy()
    )
    n = poses6.shape[0]
    if fixed is None:
        fixed_mask = np.zeros(n, dtype=bool)
        fixed_mask[0] = True
    else:
        fixed_mask = np.asarray(fixed, dtype=bool).copy()
    return ParameterState(poses6, proxies6, fixed_mask)


# ---------------------------------------------------------------------------
# residual blocks


@dataclass
class PlaneFitBlock:
    """E_cp rows between a proxy plane and a camera-space plane under a pose
    (serves both the coplanarity and the proxy-fit terms)."""

    proxy: np.ndarray  # (m,) proxy block index
    frame: np.ndarray  # (m,)
    normal_cam: np.ndarray  # (m, 3) sign-adjusted at creation
    point_cam: np.ndarray  # (m, 3)
    label: list = field(default_factory=list)  # constraint ids for diagnostics

    def __len__(self):
        return self.proxy.shape[0]


def _empty(jac: bool):
    return (np.zeros(0), (0, _Triplets()) if jac else None)


@dataclass
class RelationBlock:
    pair_a: np.ndarray  # (m,) proxy index
    pair_b: np.ndarray
    pair_sign: np.ndarray  # -1 parallel, +1 antiparallel
    pair_w: np.ndarray  # sqrt(w_jk)
    orth_a: np.ndarray
    orth_b: np.ndarray
    orth_w: np.ndarray


@dataclass
class CorrespondenceBlock:
    pl_frame_a: np.ndarray
    pl_pos_a: np.ndarray
    pl_dir_a: np.ndarray
    pl_frame_b: np.ndarray
    pl_pos_b: np.ndarray
    ed_frame_a: np.ndarray
    ed_pos_a: np.ndarray
    ed_dir_a: np.ndarray
    ed_frame_b: np.ndarray
    ed_pos_b: np.ndarray


@dataclass
class AnchorBlock:
    j: np.ndarray  # (m,) earlier frame
    k: np.ndarray  # (m,) later frame (j + stride)
    rot_ref: np.ndarray  # (m, 3, 3) reference relative rotation
    t_ref: np.ndarray  # (m, 3) reference relative translation


@dataclass
class PointBlock:
    frame_a: np.ndarray
    pos_a: np.ndarray
    frame_b: np.ndarray
    pos_b: np.ndarray


@dataclass
class Problem:
    n_frames: int
    blocks: dict
    weights: EnergyWeights
    prev: ParameterState | None = None  # inertia reference


def empty_plane_block() -> PlaneFitBlock:
    z = np.zeros(0, dtype=np.int64)
    return PlaneFitBlock(z, z.copy(), np.zeros((0, 3)), np.zeros((0, 3)))


def empty_relation_block() -> RelationBlock:
    z = np.zeros(0, dtype=np.int64)
    f = np.zeros(0)
    return RelationBlock(z, z.copy(), f, f.copy(), z.copy(), z.copy(), f.copy())


def empty_correspondence_block() -> CorrespondenceBlock:
    z = np.zeros(0, dtype=np.int64)
    v = np.zeros((0, 3))
    return CorrespondenceBlock(
        z, v, v.copy(), z.copy(), v.copy(), z.copy(), v.copy(), v.copy(), z.copy(), v.copy()
    )


def empty_anchor_block() -> AnchorBlock:
    z = np.zeros(0, dtype=np.int64)
    return AnchorBlock(z, z.copy(), np.zeros((0, 3, 3)), np.zeros((0, 3)))


def empty_point_block() -> PointBlock:
    z = np.zeros(0, dtype=np.int64)
    return PointBlock(z, np.zeros((0, 3)), z.copy(), np.zeros((0, 3)))


def make_problem(
    state: ParameterState,
    weights: EnergyWeights = EnergyWeights(),
    t0_poses: np.ndarray | None = None,
    k_max: int = 4,
    **blocks,
) -> Problem:
    """Problem with the given blocks; unspecified families are empty.

    Accepted keys: h, g, p, c, pt.  Anchors come from t0_poses when given.
    The inertia reference is the input state.
    """
    full = {
        "h": blocks.get("h", empty_plane_block()),
        "g": blocks.get("g", empty_relation_block()),
        "p": blocks.get("p", empty_plane_block()),
        "c": blocks.get("c", empty_correspondence_block()),
        "l": anchor_block(t0_poses, k_max) if t0_poses is not None else empty_anchor_block(),
        "pt": blocks.get("pt", empty_point_block()),
    }
    return Problem(n_frames=state.n_poses, blocks=full, weights=weights, prev=state.copy())


def anchor_block(t0_poses: np.ndarray, k_max: int = 4) -> AnchorBlock:
    """Relative-transform anchors at strides 2^0 .. 2^k_max."""
    t0 = np.asarray(t0_poses, dtype=np.float64).reshape(-1, 6)
    n = t0.shape[0]
    rot = rotation_matrices(t0[:, :3])
    js, ks = [], []
    for k in range(k_max + 1):
        s = 2**k
        if s > n - 1:
            break
        jj = np.arange(n - s)
        js.append(jj)
        ks.append(jj + s)
    if not js:
        z = np.zeros(0, dtype=np.int64)
        return AnchorBlock(z, z.copy(), np.zeros((0, 3, 3)), np.zeros((0, 3)))
    j = np.concatenate(js)
    k = np.concatenate(ks)
    rot_ref = np.einsum("mki,mkj->mij", rot[k], rot[j])  # R_k^T R_j
    t_ref = np.einsum("mki,mk->mi", rot[k], t0[j, 3:] - t0[k, 3:])
    return AnchorBlock(j=j, k=k, rot_ref=rot_ref, t_ref=t_ref)


def build_problem(
    cset: ConstraintSet,
    features,
    t0_poses: np.ndarray,
    weights: EnergyWeights,
    state: ParameterState,
    k_max: int = 4,
) -> Problem:
    """Assemble residual blocks from one iteration's constraint set.

    Sign conventions (child plane orientation against its parent, feature
    normal against its proxy) are frozen here so residuals stay smooth
    during the solve.
    """
    n = state.n_poses
    rot = rotation_matrices(state.poses[:, :3])
    trans = state.poses[:, 3:]

    leaf_by_id = {leaf.id: leaf for leaf in cset.leaves}
    parent_index = {p.id: i for i, p in enumerate(cset.parents)}

    # coplanarity rows
    h_proxy, h_frame, h_nc, h_pc, h_label = [], [], [], [], []
    for c in cset.coplanarity:
        if c.parent not in parent_index:
            raise SolverError(f"coplanarity constraint references unknown proxy {c.parent}")
        leaf = leaf_by_id.get(c.child)
        if leaf is None:
            raise SolverError(f"coplanarity constraint references unknown proxy {c.child}")
        pi = parent_index[c.parent]
        nw = rot[leaf.frame] @ leaf.plane_cam.normal
        sign = 1.0 if float(nw @ state.proxies[pi, :3]) >= 0 else -1.0
        h_proxy.append(pi)
        h_frame.append(leaf.frame)
        h_nc.append(sign * leaf.plane_cam.normal)
        h_pc.append(leaf.plane_cam.point)
        h_label.append((c.parent, c.child))
    h_block = PlaneFitBlock(
        proxy=np.array(h_proxy, dtype=np.int64),
        frame=np.array(h_frame, dtype=np.int64),
        normal_cam=np.array(h_nc, dtype=np.float64).reshape(-1, 3),
        point_cam=np.array(h_pc, dtype=np.float64).reshape(-1, 3),
        label=h_label,
    )

    # proxy-fit rows from the sampled features
    fits = cset.proxy_fits
    p_nc = np.zeros((len(fits), 3))
    p_pc = np.zeros((len(fits), 3))
    for row in range(len(fits)):
        f = int(fits.frame[row])
        idx = int(fits.idx[row])
        pi = int(fits.proxy[row])
        d = features[f].directions[idx]
        nw = rot[f] @ d
        sign = 1.0 if float(nw @ state.proxies[pi, :3]) >= 0 else -1.0
        p_nc[row] = sign * d
        p_pc[row] = features[f].positions[idx]
    p_block = PlaneFitBlock(
        proxy=fits.proxy.astype(np.int64),
        frame=fits.frame.astype(np.int64),
        normal_cam=p_nc,
        point_cam=p_pc,
    )

    # relations
    pa, pb, ps, pw, oa, ob, ow = [], [], [], [], [], [], []
    for r in cset.relations:
        ia, ib = parent_index[r.a], parent_index[r.b]
        if r.kind == "orthogonal":
            oa.append(ia)
            ob.append(ib)
            ow.append(np.sqrt(r.weight))
        else:
            pa.append(ia)
            pb.append(ib)
            ps.append(-1.0 if r.kind == "parallel" else 1.0)
            pw.append(np.sqrt(r.weight))
    g_block = RelationBlock(
        pair_a=np.array(pa, dtype=np.int64),
        pair_b=np.array(pb, dtype=np.int64),
        pair_sign=np.array(ps, dtype=np.float64),
        pair_w=np.array(pw, dtype=np.float64),
        orth_a=np.array(oa, dtype=np.int64),
        orth_b=np.array(ob, dtype=np.int64),
        orth_w=np.array(ow, dtype=np.float64),
    )

    corr = cset.correspondences
    is_plane = corr.kind == CORR_PLANE
    is_edge = corr.kind == CORR_EDGE

    def gather(sel):
        fa = corr.frame_a[sel]
        fb = corr.frame_b[sel]
        ia = corr.idx_a[sel]
        ib = corr.idx_b[sel]
        pos_a = np.array([features[f].positions[i] for f, i in zip(fa, ia)]).reshape(-1, 3)
        dir_a = np.array([features[f].directions[i] for f, i in zip(fa, ia)]).reshape(-1, 3)
        pos_b = np.array([features[f].positions[i] for f, i in zip(fb, ib)]).reshape(-1, 3)
        return fa, pos_a, dir_a, fb, pos_b

    pl = gather(is_plane)
    ed = gather(is_edge)
    c_block = CorrespondenceBlock(
        pl_frame_a=pl[0], pl_pos_a=pl[1], pl_dir_a=pl[2], pl_frame_b=pl[3], pl_pos_b=pl[4],
        ed_frame_a=ed[0], ed_pos_a=ed[1], ed_dir_a=ed[2], ed_frame_b=ed[3], ed_pos_b=ed[4],
    )

    blocks = {
        "h": h_block,
        "g": g_block,
        "p": p_block,
        "c": c_block,
        "l": anchor_block(t0_poses, k_max),
        "pt": PointBlock(
            np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros((0, 3))
        ),
    }
    assert n == t0_poses.shape[0]
    return Problem(n_frames=n, blocks=blocks, weights=weights, prev=state.copy())


# ---------------------------------------------------------------------------
# residual/jacobian evaluation


def _skew(v: np.ndarray) -> np.ndarray:
    """(m, 3) -> (m, 3, 3) cross-product matrices."""
    m = v.shape[0]
    s = np.zeros((m, 3, 3))
    s[:, 0, 1] = -v[:, 2]
    s[:, 0, 2] = v[:, 1]
    s[:, 1, 0] = v[:, 2]
    s[:, 1, 2] = -v[:, 0]
    s[:, 2, 0] = -v[:, 1]
    s[:, 2, 1] = v[:, 0]
    return s


class _Columns:
    """Column layout: 6 per free pose, then 6 per proxy.  Fixed poses get a
    base of -6 so base + k stays negative for every in-block offset k < 6."""

    def __init__(self, state: ParameterState):
        self.n = state.n_poses
        free = ~state.fixed
        self.pose_col = np.where(free, 6 * (np.cumsum(free) - 1), -6).astype(np.int64)
        self.proxy_col = 6 * int(free.sum()) + 6 * np.arange(state.n_proxies, dtype=np.int64)
        self.total = 6 * int(free.sum()) + 6 * state.n_proxies


class _Triplets:
    def __init__(self):
        self.rows = []
        self.cols = []
        self.vals = []

    def add(self, rows, cols, vals):
        """Append triplets, dropping entries whose column is negative."""
        rows = np.asarray(rows).ravel()
        cols = np.asarray(cols).ravel()
        vals = np.asarray(vals, dtype=np.float64).ravel()
        keep = cols >= 0
        self.rows.append(rows[keep])
        self.cols.append(cols[keep])
        self.vals.append(vals[keep])

    def build(self, shape):
        if not self.rows:
            return csr_matrix(shape)
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        return csr_matrix((vals, (rows, cols)), shape=shape)


def _pose_cache(state: ParameterState, want_jacobian: bool):
    rot = rotation_matrices(state.poses[:, :3])
    drot = rotation_derivatives(state.poses[:, :3]) if want_jacobian else None
    return rot, state.poses[:, 3:], drot


def residuals_plane_fits(state, block: PlaneFitBlock, jac=False, cache=None):
    """5 rows per constraint: two point-to-plane offsets and the scaled
    normal cross product between the proxy plane and the transformed plane."""
    m = len(block)
    if m == 0:
        return _empty(jac)
    rot, trans, drot = cache if cache is not None else _pose_cache(state, jac)
    npx = state.proxies[block.proxy, :3]
    ppx = state.proxies[block.proxy, 3:]
    r_f = rot[block.frame]
    nb = np.einsum("mij,mj->mi", r_f, block.normal_cam)
    pb = np.einsum("mij,mj->mi", r_f, block.point_cam) + trans[block.frame]
    d = pb - ppx
    sl = np.sqrt(LAMBDA_NORMAL)
    res = np.zeros((m, 5))
    res[:, 0] = np.einsum("mi,mi->m", d, npx)
    res[:, 1] = -np.einsum("mi,mi->m", d, nb)
    res[:, 2:5] = sl * np.cross(npx, nb)
    if not jac:
        return res.ravel(), None

    tr = _Triplets()
    rows5 = 5 * np.arange(m)
    cols = _Columns(state)
    dn = np.einsum("mkij,mj->mki", drot[block.frame], block.normal_cam)  # (m, 3ang, 3)
    dp = np.einsum("mkij,mj->mki", drot[block.frame], block.point_cam)
    pose_base = cols.pose_col[block.frame]
    # row 0: d . N
    for k in range(3):
        tr.add(rows5, pose_base + k, np.einsum("mi,mi->m", dp[:, k], npx))
        tr.add(rows5, pose_base + 3 + k, npx[:, k])
    # row 1: -(d . nb)
    for k in range(3):
        v = -np.einsum("mi,mi->m", d, dn[:, k]) - np.einsum("mi,mi->m", dp[:, k], nb)
        tr.add(rows5 + 1, pose_base + k, v)
        tr.add(rows5 + 1, pose_base + 3 + k, -nb[:, k])
    # rows 2..4: sl * cross(N, nb)
    cr_dn = sl * np.cross(npx[:, None, :], dn)  # (m, 3ang, 3row)
    for k in range(3):
        for row in range(3):
            tr.add(rows5 + 2 + row, pose_base + k, cr_dn[:, k, row])
    # proxy jacobians
    pcol = cols.proxy_col[block.proxy]
    for k in range(3):
        tr.add(rows5, pcol + k, d[:, k])  # d(d.N)/dN
        tr.add(rows5 + 1, pcol + 3 + k, nb[:, k])  # d(-(pb-P).nb)/dP = +nb
        tr.add(rows5, pcol + 3 + k, -npx[:, k])  # d(d.N)/dP = -N
    skew_nb = _skew(nb)
    for k in range(3):
        for row in range(3):
            tr.add(rows5 + 2 + row, pcol + k, -sl * skew_nb[:, row, k])
    return res.ravel(), (5 * m, tr)


def residuals_relations(state, block: RelationBlock, jac=False, cache=None):
    """3 rows per parallel/antiparallel pair, 1 per orthogonal pair; each
    scaled by its sqrt relation weight."""
    npx = state.proxies[:, :3]
    mp = block.pair_a.shape[0]
    mo = block.orth_a.shape[0]
    res_p = (
        block.pair_w[:, None] * (npx[block.pair_a] + block.pair_sign[:, None] * npx[block.pair_b])
        if mp
        else np.zeros((0, 3))
    )
    res_o = (
        block.orth_w * np.einsum("mi,mi->m", npx[block.orth_a], npx[block.orth_b])
        if mo
        else np.zeros(0)
    )
    res = np.concatenate([res_p.ravel(), res_o])
    if not jac:
        return res, None
    cols = _Columns(state)
    tr = _Triplets()
    if mp:
        rows3 = 3 * np.arange(mp)
        for row in range(3):
            tr.add(rows3 + row, cols.proxy_col[block.pair_a] + row, block.pair_w)
            tr.add(rows3 + row, cols.proxy_col[block.pair_b] + row, block.pair_w * block.pair_sign)
    if mo:
        rows = 3 * mp + np.arange(mo)
        for k in range(3):
            tr.add(rows, cols.proxy_col[block.orth_a] + k, block.orth_w * npx[block.orth_b, k])
            tr.add(rows, cols.proxy_col[block.orth_b] + k, block.orth_w * npx[block.orth_a, k])
    return res, (3 * mp + mo, tr)


def residuals_correspondences(state, block: CorrespondenceBlock, jac=False, cache=None):
    """1 point-to-plane row per planar match, 3 cross-product rows per edge
    match."""
    rot, trans, drot = cache if cache is not None else _pose_cache(state, jac)
    mp = block.pl_frame_a.shape[0]
    me = block.ed_frame_a.shape[0]

    res_parts = []
    if mp:
        ra = rot[block.pl_frame_a]
        rb = rot[block.pl_frame_b]
        na = np.einsum("mij,mj->mi", ra, block.pl_dir_a)
        pa = np.einsum("mij,mj->mi", ra, block.pl_pos_a) + trans[block.pl_frame_a]
        pb = np.einsum("mij,mj->mi", rb, block.pl_pos_b) + trans[block.pl_frame_b]
        u_pl = pb - pa
        res_parts.append(np.einsum("mi,mi->m", u_pl, na))
    if me:
        ra_e = rot[block.ed_frame_a]
        rb_e = rot[block.ed_frame_b]
        na_e = np.einsum("mij,mj->mi", ra_e, block.ed_dir_a)
        pa_e = np.einsum("mij,mj->mi", ra_e, block.ed_pos_a) + trans[block.ed_frame_a]
        pb_e = np.einsum("mij,mj->mi", rb_e, block.ed_pos_b) + trans[block.ed_frame_b]
        u_ed = pb_e - pa_e
        res_parts.append(np.cross(u_ed, na_e).ravel())
    res = np.concatenate(res_parts) if res_parts else np.zeros(0)
    if not jac:
        return res, None

    cols = _Columns(state)
    tr = _Triplets()
    if mp:
        rows = np.arange(mp)
        ca = cols.pose_col[block.pl_frame_a]
        cb = cols.pose_col[block.pl_frame_b]
        dna = np.einsum("mkij,mj->mki", drot[block.pl_frame_a], block.pl_dir_a)
        dpa = np.einsum("mkij,mj->mki", drot[block.pl_frame_a], block.pl_pos_a)
        dpb = np.einsum("mkij,mj->mki", drot[block.pl_frame_b], block.pl_pos_b)
        for k in range(3):
            tr.add(rows, ca + k, np.einsum("mi,mi->m", u_pl, dna[:, k]) - np.einsum("mi,mi->m", dpa[:, k], na))
            tr.add(rows, ca + 3 + k, -na[:, k])
            tr.add(rows, cb + k, np.einsum("mi,mi->m", dpb[:, k], na))
            tr.add(rows, cb + 3 + k, na[:, k])
    if me:
        rows3 = mp + 3 * np.arange(me)
        ca = cols.pose_col[block.ed_frame_a]
        cb = cols.pose_col[block.ed_frame_b]
        dna = np.einsum("mkij,mj->mki", drot[block.ed_frame_a], block.ed_dir_a)
        dpa = np.einsum("mkij,mj->mki", drot[block.ed_frame_a], block.ed_pos_a)
        dpb = np.einsum("mkij,mj->mki", drot[block.ed_frame_b], block.ed_pos_b)
        skew_na = _skew(na_e)
        for k in range(3):
            dtheta_a = np.cross(-dpa[:, k], na_e) + np.cross(u_ed, dna[:, k])
            dtheta_b = np.cross(dpb[:, k], na_e)
            for row in range(3):
                tr.add(rows3 + row, ca + k, dtheta_a[:, row])
                tr.add(rows3 + row, cb + k, dtheta_b[:, row])
                # translations: dr/dta = +[na]x, dr/dtb = -[na]x
                tr.add(rows3 + row, ca + 3 + k, skew_na[:, row, k])
                tr.add(rows3 + row, cb + 3 + k, -skew_na[:, row, k])
    return res, (mp + 3 * me, tr)


def residuals_anchors(state, block: AnchorBlock, jac=False, cache=None):
    """12 rows per (j, j+2^k) pair: relative-translation difference and the
    rotation-weighted relative-rotation matrix difference."""
    m = block.j.shape[0]
    if m == 0:
        return _empty(jac)
    rot, trans, drot = cache if cache is not None else _pose_cache(state, jac)
    rj = rot[block.j]
    rk = rot[block.k]
    dt = trans[block.j] - trans[block.k]
    t_cur = np.einsum("mki,mk->mi", rk, dt)
    rot_cur = np.einsum("mki,mkj->mij", rk, rj)
    sl = np.sqrt(LAMBDA_ROTATION)
    res = np.zeros((m, 12))
    res[:, 0:3] = t_cur - block.t_ref
    res[:, 3:12] = sl * (rot_cur - block.rot_ref).reshape(m, 9)
    if not jac:
        return res.ravel(), None

    cols = _Columns(state)
    tr = _Triplets()
    rows12 = 12 * np.arange(m)
    cj = cols.pose_col[block.j]
    ck = cols.pose_col[block.k]
    drj = drot[block.j]
    drk = drot[block.k]
    # translation rows: t = Rk^T (tj - tk)
    for k in range(3):
        # d/d tj_k = Rk^T e_k -> column k of Rk^T = row k of Rk
        for row in range(3):
            tr.add(rows12 + row, cj + 3 + k, rk[:, k, row])
            tr.add(rows12 + row, ck + 3 + k, -rk[:, k, row])
        dtheta_k = np.einsum("mki,mk->mi", drk[:, k], dt)
        for row in range(3):
            tr.add(rows12 + row, ck + k, dtheta_k[:, row])
    # rotation rows: vec(Rk^T Rj)
    for k in range(3):
        dj = sl * np.einsum("mki,mkj->mij", rk, drj[:, k]).reshape(m, 9)
        dk = sl * np.einsum("mki,mkj->mij", drk[:, k], rj).reshape(m, 9)
        for row in range(9):
            tr.add(rows12 + 3 + row, cj + k, dj[:, row])
            tr.add(rows12 + 3 + row, ck + k, dk[:, row])
    return res.ravel(), (12 * m, tr)


def residuals_inertia(state, prev: ParameterState, jac=False, cache=None):
    """6 rows per pose and per proxy: parameter deltas against the previous
    iteration, with angle deltas unwrapped into (-pi, pi]."""
    if prev.poses.shape != state.poses.shape or prev.proxies.shape != state.proxies.shape:
        raise SolverError(
            f"inertia reference has shape {prev.poses.shape}/{prev.proxies.shape}, "
            f"state has {state.poses.shape}/{state.proxies.shape}"
        )
    d_pose = state.poses - prev.poses
    d_pose[:, :3] -= 2 * np.pi * np.round(d_pose[:, :3] / (2 * np.pi))
    d_proxy = state.proxies - prev.proxies
    res = np.concatenate([d_pose.ravel(), d_proxy.ravel()])
    if not jac:
        return res, None
    cols = _Columns(state)
    tr = _Triplets()
    n = state.n_poses
    rows = 6 * np.arange(n)
    for k in range(6):
        tr.add(rows + k, cols.pose_col + k, np.ones(n))
    p = state.n_proxies
    if p:
        prows = 6 * n + 6 * np.arange(p)
        for k in range(6):
            tr.add(prows + k, cols.proxy_col + k, np.ones(p))
    return res, (6 * n + 6 * p, tr)


def residuals_points(state, block: PointBlock, jac=False, cache=None):
    """3 rows per pair: difference of the two transformed points."""
    m = block.frame_a.shape[0]
    if m == 0:
        return _empty(jac)
    rot, trans, drot = cache if cache is not None else _pose_cache(state, jac)
    pa = np.einsum("mij,mj->mi", rot[block.frame_a], block.pos_a) + trans[block.frame_a]
    pb = np.einsum("mij,mj->mi", rot[block.frame_b], block.pos_b) + trans[block.frame_b]
    res = pa - pb
    if not jac:
        return res.ravel(), None
    cols = _Columns(state)
    tr = _Triplets()
    rows3 = 3 * np.arange(m)
    ca = cols.pose_col[block.frame_a]
    cb = cols.pose_col[block.frame_b]
    dpa = np.einsum("mkij,mj->mki", drot[block.frame_a], block.pos_a)
    dpb = np.einsum("mkij,mj->mki", drot[block.frame_b], block.pos_b)
    ones = np.ones(m)
    for k in range(3):
        for row in range(3):
            tr.add(rows3 + row, ca + k, dpa[:, k, row])
            tr.add(rows3 + row, cb + k, -dpb[:, k, row])
        tr.add(rows3 + k, ca + 3 + k, ones)
        tr.add(rows3 + k, cb + 3 + k, -ones)
    return res.ravel(), (3 * m, tr)


_FAMILY_FN = {
    "h": lambda state, problem, jac, cache: residuals_plane_fits(state, problem.blocks["h"], jac, cache),
    "g": lambda state, problem, jac, cache: residuals_relations(state, problem.blocks["g"], jac, cache),
    "p": lambda state, problem, jac, cache: residuals_plane_fits(state, problem.blocks["p"], jac, cache),
    "c": lambda state, problem, jac, cache: residuals_correspondences(state, problem.blocks["c"], jac, cache),
    "l": lambda state, problem, jac, cache: residuals_anchors(state, problem.blocks["l"], jac, cache),
    "i": lambda state, problem, jac, cache: residuals_inertia(state, problem.prev, jac, cache),
    "pt": lambda state, problem, jac, cache: residuals_points(state, problem.blocks["pt"], jac, cache),
}


def family_residuals(state: ParameterState, problem: Problem, family: str, jac=False):
    cache = _pose_cache(state, jac)
    return _FAMILY_FN[family](state, problem, jac, cache)


def energy(state: ParameterState, problem: Problem) -> EnergyBreakdown:
    """Per-family sums of squares and their weighted total."""
    cache = _pose_cache(state, False)
    terms = {}
    total = 0.0
    for fam in FAMILIES:
        res, _ = _FAMILY_FN[fam](state, problem, False, cache)
        val = float(res @ res)
        terms[fam] = val
        total += problem.weights.family_multiplier(fam) * val
    return EnergyBreakdown(terms=terms, weighted_total=total)


def _stacked(state: ParameterState, problem: Problem, jac: bool):
    cache = _pose_cache(state, jac)
    cols = _Columns(state)
    res_parts = []
    mats = []
    slices = {}
    offset = 0
    for fam in FAMILIES:
        res, jinfo = _FAMILY_FN[fam](state, problem, jac, cache)
        mult = np.sqrt(problem.weights.family_multiplier(fam))
        if not np.all(np.isfinite(res)):
            bad = int(np.nonzero(~np.isfinite(res))[0][0])
            raise SolverError(f"non-finite residual in family {fam!r} at row {bad}")
        res_parts.append(mult * res)
        slices[fam] = (offset, offset + res.size)
        offset += res.size
        if jac:
            nrows, tr = jinfo
            j = tr.build((nrows, cols.total))
            if not np.all(np.isfinite(j.data)):
                raise SolverError(f"non-finite jacobian entry in family {fam!r}")
            mats.append(j * mult)
    r = np.concatenate(res_parts)
    if not jac:
        return r, None, slices
    return r, vstack(mats, format="csr"), slices


def _apply_step(state: ParameterState, dx: np.ndarray) -> ParameterState:
    out = state.copy()
    free = np.nonzero(~state.fixed)[0]
    nf = free.size
    out.poses[free] += dx[: 6 * nf].reshape(nf, 6)
    if state.n_proxies:
        out.proxies += dx[6 * nf :].reshape(-1, 6)
        norms = np.linalg.norm(out.proxies[:, :3], axis=1, keepdims=True)
        out.proxies[:, :3] /= np.where(norms > 1e-12, norms, 1.0)
    return out


@dataclass(frozen=True)
class SolverOptions:
    max_inner_iterations: int = 10
    relative_tolerance: float = 1e-6
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e10


@dataclass
class SolveReport:
    initial_energy: float
    final_energy: float
    iterations: int
    accepted_steps: int
    breakdown: EnergyBreakdown
    log: list = field(default_factory=list)


def solve(
    state: ParameterState,
    problem: Problem,
    options: SolverOptions = SolverOptions(),
) -> tuple[ParameterState, SolveReport]:
    """Levenberg-Marquardt minimization; the returned energy never exceeds
    the input energy.  Proxy normals are renormalized inside every candidate
    step, so acceptance is decided on the energy actually kept."""
    current = state.copy()
    r, jmat, slices = _stacked(current, problem, True)
    e = float(r @ r)
    e0 = e

    def term_values(res):
        out = {}
        for fam, (a, b) in slices.items():
            mult = problem.weights.family_multiplier(fam)
            chunk = res[a:b]
            out[fam] = float(chunk @ chunk) / mult if mult > 0 else 0.0
        return out

    lam = options.lambda_init
    accepted = 0
    log = []
    iterations = 0
    for it in range(options.max_inner_iterations):
        iterations = it + 1
        g = jmat.T @ r
        if not np.any(np.abs(g) > 1e-14) or e <= 1e-24:
            break
        jtj = (jmat.T @ jmat).tocsc()
        diag = jtj.diagonal()
        floor = max(diag.max(), 1.0) * 1e-12
        improved = False
        drop = 0.0
        while lam <= options.lambda_max:
            damped = (jtj + diags(lam * np.maximum(diag, floor), format="csc")).tocsc()
            try:
                dx = spsolve(damped, -g)
            except Exception:
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                cand = _apply_step(current, dx)
                r2, _, _ = _stacked(cand, problem, False)
                e2 = float(r2 @ r2)
                if e2 < e:
                    log.append(
                        {
                            "iteration": it,
                            "lambda": lam,
                            "energy": e2,
                            "accepted": True,
                            "terms": term_values(r2),
                        }
                    )
                    current = cand
                    drop = (e - e2) / max(e, 1e-30)
                    e = e2
                    lam *= options.lambda_down
                    accepted += 1
                    improved = True
                    break
            log.append({"iteration": it, "lambda": lam, "energy": e, "accepted": False})
            lam *= options.lambda_up
        if not improved:
            break
        if drop < options.relative_tolerance:
            break
        r, jmat, slices = _stacked(current, problem, True)
    assert e <= e0 + 1e-30
    report = SolveReport(
        initial_energy=e0,
        final_energy=e,
        iterations=iterations,
        accepted_steps=accepted,
        breakdown=energy(current, problem),
        log=log,
    )
    return current, report
