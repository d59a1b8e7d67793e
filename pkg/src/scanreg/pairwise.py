"""Local alignment of successive frames and concatenation into an initial
trajectory.

align_pair estimates the rigid transform taking frame-k camera coordinates
into frame-(k-1) coordinates from keypoint matches (or an externally supplied
match list) with 3-point RANSAC.  A pair that cannot be aligned falls back to
the identity; the multi-stride anchors in the optimizer bridge single bad
links.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .features import Keypoints
from .geom import RigidTransform, compose, from_matrix, identity

STATUS_OK = "ok"
STATUS_FALLBACK = "fallback_identity"


@dataclass(frozen=True)
class PairwiseConfig:
    ratio_test: float = 0.8
    inlier_threshold: float = 0.05  # m
    max_iterations: int = 1000
    confidence: float = 0.99
    min_inliers: int = 12


@dataclass
class LocalAlignment:
    """Estimated transform from frame k into frame k-1 coordinates."""

    transform: RigidTransform
    inliers: int
    status: str


def match_descriptors(a: Keypoints, b: Keypoints, ratio: float = 0.8):
    """Mutual-nearest descriptor matches passing the ratio test.

    Returns (points_a (m, 3), points_b (m, 3)) of matched 3D positions.
    """
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    d = cdist(a.descriptors, b.descriptors)
    nearest_ab = np.argmin(d, axis=1)
    nearest_ba = np.argmin(d, axis=0)
    ia = np.arange(len(a))
    mutual = nearest_ba[nearest_ab] == ia
    if d.shape[1] >= 2:
        part = np.partition(d, 1, axis=1)
        ratio_ok = part[:, 0] <= ratio * part[:, 1]
    else:
        ratio_ok = np.ones(len(a), dtype=bool)
    sel = mutual & ratio_ok
    return a.positions[sel], b.positions[nearest_ab[sel]]


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform | None:
    """Least-squares rigid transform mapping src points onto dst (SVD).

    Reflections are rejected by flipping the smallest singular direction;
    returns None for degenerate (collinear) configurations.
    """
    if src.shape[0] < 3:
        return None
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, s, vt = np.linalg.svd(h)
    if s[1] < 1e-12:  # rank < 2: points are collinear
        return None
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cd - r @ cs
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t
    return from_matrix(m)


def align_pair(
    a: Keypoints | None,
    b: Keypoints | None,
    matches=None,
    cfg: PairwiseConfig = PairwiseConfig(),
    seed: int = 0,
) -> LocalAlignment:
    """RANSAC alignment of frame b onto frame a (b -> a coordinates).

    `matches` may supply precomputed (points_a, points_b) arrays, bypassing
    descriptor matching entirely.
    """
    if matches is not None:
        pa, pb = np.asarray(matches[0], dtype=np.float64), np.asarray(matches[1], dtype=np.float64)
    elif a is not None and b is not None:
        pa, pb = match_descriptors(a, b, cfg.ratio_test)
    else:
        return LocalAlignment(identity(), 0, STATUS_FALLBACK)

    n = pa.shape[0]
    if n < 3:
        return LocalAlignment(identity(), 0, STATUS_FALLBACK)

    rng = np.random.default_rng([seed, 17])
    best_inliers: np.ndarray | None = None
    best_count = 0
    max_iter = cfg.max_iterations
    it = 0
    while it < max_iter:
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        model = fit_rigid(pb[idx], pa[idx])
        if model is None:
            continue
        err = np.linalg.norm(model.apply(pb) - pa, axis=1)
        inliers = err < cfg.inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            w = count / n
            if w > 0:
                # early exit once the confidence target is reached
                denom = np.log(max(1.0 - w**3, 1e-12))
                needed = int(np.ceil(np.log(1.0 - cfg.confidence) / denom)) if denom < 0 else max_iter
                max_iter = min(max_iter, max(it, needed))

    if best_inliers is None or best_count < cfg.min_inliers:
        return LocalAlignment(identity(), 0, STATUS_FALLBACK)
    refined = fit_rigid(pb[best_inliers], pa[best_inliers])
    if refined is None:
        return LocalAlignment(identity(), 0, STATUS_FALLBACK)
    err = np.linalg.norm(refined.apply(pb) - pa, axis=1)
    final_inliers = int((err < cfg.inlier_threshold).sum())
    return LocalAlignment(refined, final_inliers, STATUS_OK)


def concatenate(alignments: list[LocalAlignment | RigidTransform]) -> list[RigidTransform]:
    """Fold n-1 local alignments into n poses: T[0] = I, T[k] = T[k-1] * L[k].

    Each alignment maps frame-k points into frame k-1, so right-composition
    chains them into the frame-0 (world) coordinate system.
    """
    poses = [identity()]
    for item in alignments:
        t = item.transform if isinstance(item, LocalAlignment) else item
        poses.append(compose(poses[-1], t))
    return poses


def load_match_file(path):
    """Read a precomputed-match file: {frame_a, frame_b, matches: [...]}.

    Returns (frame_a, frame_b, points_a (m, 3), points_b (m, 3)).
    """
    with open(path) as f:
        doc = json.load(f)
    pa = np.array([m["xyz_a"] for m in doc["matches"]], dtype=np.float64).reshape(-1, 3)
    pb = np.array([m["xyz_b"] for m in doc["matches"]], dtype=np.float64).reshape(-1, 3)
    return int(doc["frame_a"]), int(doc["frame_b"]), pa, pb


def save_match_file(path, frame_a: int, frame_b: int, points_a, points_b) -> None:
    doc = {
        "frame_a": frame_a,
        "frame_b": frame_b,
        "matches": [
            {"xyz_a": list(map(float, xa)), "xyz_b": list(map(float, xb))}
            for xa, xb in zip(points_a, points_b)
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)
