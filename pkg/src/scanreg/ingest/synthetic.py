"""Synthetic multi-room scene generation with ground-truth poses.

Scenes are unions of rectangular rooms (optionally yawed in the floor plan)
with doorway holes cut where an axis-aligned doorway box crosses a wall.
The world frame is z-up; cameras follow a keyframed position/look-at path.
Rendered depth uses the camera-z convention (a wall fronto-parallel at 2 m
reads 2.0 at every pixel) with Gaussian noise sigma(z) = a + b * z^2, and a
checkerboard gray channel is synthesized from the hit surface coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..geom import RigidTransform, compose, matrix_to_euler, relative
from .frames import MAX_DEPTH_M, DepthFrame, Intrinsics


class SceneError(ValueError):
    """Invalid scene spec; `pointer` is a JSON-pointer to the offending field."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer


@dataclass
class Room:
    min_xy: np.ndarray
    max_xy: np.ndarray
    height: float = 2.5
    yaw: float = 0.0  # radians, about the room center

    def __post_init__(self):
        self.min_xy = np.asarray(self.min_xy, dtype=np.float64)
        self.max_xy = np.asarray(self.max_xy, dtype=np.float64)
        if not np.all(self.max_xy > self.min_xy) or self.height <= 0:
            raise SceneError("room must have positive area and height")

    @property
    def center(self) -> np.ndarray:
        return (self.min_xy + self.max_xy) / 2.0

    def contains(self, point: np.ndarray) -> bool:
        p = np.asarray(point, dtype=np.float64)
        if not (0.0 < p[2] < self.height):
            return False
        c, s = np.cos(-self.yaw), np.sin(-self.yaw)
        rel = p[:2] - self.center
        local = np.array([c * rel[0] - s * rel[1], s * rel[0] + c * rel[1]]) + self.center
        return bool(np.all(local >= self.min_xy - 1e-9) and np.all(local <= self.max_xy + 1e-9))


@dataclass
class DriftModel:
    """Per-step pose noise for perturbing ground-truth local alignments."""

    rot_noise: float = 0.0  # rad std, per axis
    trans_noise: float = 0.0  # m std, per axis
    rot_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rot_bias = np.asarray(self.rot_bias, dtype=np.float64)
        self.trans_bias = np.asarray(self.trans_bias, dtype=np.float64)


@dataclass
class SyntheticScene:
    rooms: list[Room]
    keyframes: list[tuple[np.ndarray, np.ndarray]]  # (position, look_at)
    frames_per_segment: list[int]
    intrinsics: Intrinsics
    doorways: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    noise: tuple[float, float] = (0.0, 0.0)  # sigma(z) = a + b z^2
    checker: float = 0.25  # checkerboard cell size (m); 0 disables gray
    seed: int = 0
    drift: DriftModel | None = None


def scene_from_json(text: str) -> SyntheticScene:
    """Parse and validate the scene-spec JSON document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneError(f"not valid JSON: {e}")

    def need(obj, key, pointer):
        if key not in obj:
            raise SceneError("missing required field", f"{pointer}/{key}")
        return obj[key]

    rooms = []
    for i, r in enumerate(need(doc, "rooms", "")):
        try:
            rooms.append(
                Room(
                    min_xy=need(r, "min", f"/rooms/{i}"),
                    max_xy=need(r, "max", f"/rooms/{i}"),
                    height=r.get("height", 2.5),
                    yaw=np.deg2rad(r.get("yaw_deg", 0.0)),
                )
            )
        except SceneError as e:
            if e.pointer:
                raise
            raise SceneError(str(e), f"/rooms/{i}") from None
    doorways = []
    for i, d in enumerate(doc.get("doorways", [])):
        lo = np.asarray(need(d, "min", f"/doorways/{i}"), dtype=np.float64)
        hi = np.asarray(need(d, "max", f"/doorways/{i}"), dtype=np.float64)
        if not np.all(hi > lo):
            raise SceneError("doorway box must have positive extent", f"/doorways/{i}")
        doorways.append((lo, hi))

    traj = need(doc, "trajectory", "")
    keyframes = []
    for i, k in enumerate(need(traj, "keyframes", "/trajectory")):
        pos = np.asarray(need(k, "position", f"/trajectory/keyframes/{i}"), dtype=np.float64)
        look = np.asarray(need(k, "look_at", f"/trajectory/keyframes/{i}"), dtype=np.float64)
        keyframes.append((pos, look))
    fps = [int(x) for x in need(traj, "frames_per_segment", "/trajectory")]
    if len(fps) != len(keyframes) - 1:
        raise SceneError(
            f"need {len(keyframes) - 1} segment counts for {len(keyframes)} keyframes",
            "/trajectory/frames_per_segment",
        )
    if any(x < 1 for x in fps):
        raise SceneError("segment counts must be >= 1", "/trajectory/frames_per_segment")

    intr = need(doc, "intrinsics", "")
    try:
        intrinsics = Intrinsics(
            fx=need(intr, "fx", "/intrinsics"),
            fy=need(intr, "fy", "/intrinsics"),
            cx=need(intr, "cx", "/intrinsics"),
            cy=need(intr, "cy", "/intrinsics"),
            width=int(need(intr, "width", "/intrinsics")),
            height=int(need(intr, "height", "/intrinsics")),
        )
    except ValueError as e:
        raise SceneError(str(e), "/intrinsics") from None

    noise = doc.get("noise", {})
    drift = None
    if "drift" in doc:
        d = doc["drift"]
        drift = DriftModel(
            rot_noise=np.deg2rad(d.get("rot_noise_deg", 0.0)),
            trans_noise=d.get("trans_noise", 0.0),
            rot_bias=np.deg2rad(np.asarray(d.get("rot_bias_deg", [0, 0, 0]), dtype=np.float64)),
            trans_bias=d.get("trans_bias", [0, 0, 0]),
        )
    return SyntheticScene(
        rooms=rooms,
        doorways=doorways,
        keyframes=keyframes,
        frames_per_segment=fps,
        intrinsics=intrinsics,
        noise=(float(noise.get("a", 0.0)), float(noise.get("b", 0.0))),
        checker=float(doc.get("checker", 0.25)),
        seed=int(doc.get("seed", 0)),
        drift=drift,
    )


def load_scene(path) -> SyntheticScene:
    with open(path) as f:
        return scene_from_json(f.read())


def _yaw_about(points, center, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    rel = points[..., :2] - center
    out = points.copy()
    out[..., 0] = c * rel[..., 0] - s * rel[..., 1] + center[0]
    out[..., 1] = s * rel[..., 0] + c * rel[..., 1] + center[1]
    return out


def scene_rectangles(scene: SyntheticScene):
    """World-space wall/floor/ceiling rectangles and doorway holes.

    Returns (rects (r, 11), holes (m, 5)) in the layout the raycast kernels
    expect.
    """
    rows = []
    for room in scene.rooms:
        x0, y0 = room.min_xy
        x1, y1 = room.max_xy
        h = room.height
        lx, ly = x1 - x0, y1 - y0
        ex = np.array([1.0, 0.0, 0.0])
        ey = np.array([0.0, 1.0, 0.0])
        ez = np.array([0.0, 0.0, 1.0])
        walls = [
            (np.array([x0, y0, 0.0]), ey, ez, ly, h),
            (np.array([x1, y0, 0.0]), ey, ez, ly, h),
            (np.array([x0, y0, 0.0]), ex, ez, lx, h),
            (np.array([x0, y1, 0.0]), ex, ez, lx, h),
            (np.array([x0, y0, 0.0]), ex, ey, lx, ly),  # floor
            (np.array([x0, y0, h]), ex, ey, lx, ly),  # ceiling
        ]
        for origin, e1, e2, l1, l2 in walls:
            if abs(room.yaw) > 1e-12:
                origin = _yaw_about(origin, room.center, room.yaw)
                e1 = _yaw_about(e1 + np.array([*room.center, 0.0]), room.center, room.yaw) - np.array(
                    [*room.center, 0.0]
                )
                e2 = _yaw_about(e2 + np.array([*room.center, 0.0]), room.center, room.yaw) - np.array(
                    [*room.center, 0.0]
                )
            rows.append(np.concatenate([origin, e1, e2, [l1, l2]]))
    rects = np.asarray(rows).reshape(-1, 11)

    holes = []
    for lo, hi in scene.doorways:
        corners = np.array(
            [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
        )
        for i in range(rects.shape[0]):
            o, e1, e2 = rects[i, 0:3], rects[i, 3:6], rects[i, 6:9]
            n = np.cross(e1, e2)
            dist = (corners - o) @ n
            if dist.min() > 1e-9 or dist.max() < -1e-9:
                continue  # box does not straddle this rect's plane
            s1 = (corners - o) @ e1
            s2 = (corners - o) @ e2
            a0, a1 = max(s1.min(), 0.0), min(s1.max(), rects[i, 9])
            b0, b1 = max(s2.min(), 0.0), min(s2.max(), rects[i, 10])
            if a1 > a0 and b1 > b0:
                holes.append([i, a0, a1, b0, b1])
    holes_arr = np.asarray(holes, dtype=np.float64).reshape(-1, 5)
    return rects, holes_arr


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera pose (x right, y down, z forward) looking from position at target."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise SceneError("look_at coincides with position")
    forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:  # looking straight up/down; pick an arbitrary right
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        rnorm = np.linalg.norm(right)
    right = right / rnorm
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return RigidTransform(matrix_to_euler(rot), position)


def ground_truth_poses(scene: SyntheticScene) -> list[RigidTransform]:
    """Interpolated keyframe path; one pose per rendered frame."""
    poses = []
    for seg in range(len(scene.frames_per_segment)):
        p0, l0 = scene.keyframes[seg]
        p1, l1 = scene.keyframes[seg + 1]
        count = scene.frames_per_segment[seg]
        for j in range(count):
            t = j / count
            poses.append(look_at_pose(p0 + t * (p1 - p0), l0 + t * (l1 - l0)))
    p_last, l_last = scene.keyframes[-1]
    poses.append(look_at_pose(p_last, l_last))
    for k, pose in enumerate(poses):
        if not any(room.contains(pose.translation) for room in scene.rooms):
            raise SceneError(f"frame {k} pose outside all rooms")
    return poses


def render_frame(scene, rects, holes, pose, index, clean=False):
    """Raycast one frame; returns (DepthFrame, clean_depth)."""
    intr = scene.intrinsics
    rot = pose.rotation_matrix()
    depth, rect_id, s1, s2 = kernels.raycast(
        rot,
        pose.translation,
        intr.fx,
        intr.fy,
        intr.cx,
        intr.cy,
        intr.width,
        intr.height,
        rects,
        holes,
        MAX_DEPTH_M,
    )
    gray = None
    if scene.checker > 0:
        cells = np.floor(s1 / scene.checker) + np.floor(s2 / scene.checker) + rect_id
        gray = np.where(rect_id >= 0, 0.3 + 0.4 * (np.mod(cells, 2.0)), 0.0)
    clean_depth = depth
    a, b = scene.noise
    if not clean and (a > 0 or b > 0):
        rng = np.random.default_rng([scene.seed, 7, index])
        sigma = a + b * depth**2
        noisy = depth + rng.standard_normal(depth.shape) * sigma
        noisy[(depth <= 0) | (noisy <= 0) | (noisy > MAX_DEPTH_M)] = 0.0
        depth = noisy
    frame = DepthFrame(index=index, depth=depth, intrinsics=intr, gray=gray)
    return frame, clean_depth


def synth_scene(scene: SyntheticScene, seed: int | None = None):
    """Render every frame of the scene.

    Returns (frames, gt_poses, clean_depths); deterministic for a given
    seed (which overrides the one embedded in the scene spec).
    """
    if seed is not None:
        scene.seed = seed
    rects, holes = scene_rectangles(scene)
    poses = ground_truth_poses(scene)
    frames = []
    clean = []
    for k, pose in enumerate(poses):
        frame, clean_depth = render_frame(scene, rects, holes, pose, k)
        frames.append(frame)
        clean.append(clean_depth)
    return frames, poses, clean


def perturb_trajectory(
    gt_poses: list[RigidTransform], drift: DriftModel, seed: int = 0
) -> list[RigidTransform]:
    """Ground-truth successive relative transforms with injected noise.

    Element k maps frame k+1 coordinates into frame k coordinates.  A zero
    drift model returns the exact relative transforms; the bias terms
    accumulate into systematic drift under concatenation.
    """
    if len(gt_poses) < 2:
        raise ValueError("need at least 2 poses")
    rng = np.random.default_rng([seed, 11])
    out = []
    for k in range(1, len(gt_poses)):
        true_rel = relative(gt_poses[k], gt_poses[k - 1])
        noise = RigidTransform(
            drift.rot_bias + rng.standard_normal(3) * drift.rot_noise,
            drift.trans_bias + rng.standard_normal(3) * drift.trans_noise,
        )
        out.append(compose(true_rel, noise))
    return out


def plant_benchmark(
    frames: list[DepthFrame],
    gt_poses: list[RigidTransform],
    clean_depths: list[np.ndarray],
    count: int = 400,
    offsets=(1, 2, 5, 10, 25, 50, 100, 200, 400),
    seed: int = 0,
) -> list[dict]:
    """Plant pixel correspondences observing the same surface point.

    Pairs are spread over the given frame offsets (clipped to the sequence
    length).  Pixel coordinates are integer, mimicking manually clicked
    points; geometric consistency is checked against the clean depth.
    """
    rng = np.random.default_rng([seed, 13])
    n = len(frames)
    intr = frames[0].intrinsics
    usable = [o for o in offsets if o < n]
    entries = []
    attempts = 0
    while len(entries) < count and attempts < count * 200:
        attempts += 1
        off = usable[rng.integers(len(usable))]
        a = int(rng.integers(0, n - off))
        b = a + off
        ua = int(rng.integers(2, intr.width - 2))
        va = int(rng.integers(2, intr.height - 2))
        za = clean_depths[a][va, ua]
        if za <= 0:
            continue
        cam_a = np.array([(ua - intr.cx) / intr.fx * za, (va - intr.cy) / intr.fy * za, za])
        world = gt_poses[a].apply(cam_a)
        rb = gt_poses[b].rotation_matrix()
        cam_b = rb.T @ (world - gt_poses[b].translation)
        if cam_b[2] <= 0.05:
            continue
        ub = int(round(intr.fx * cam_b[0] / cam_b[2] + intr.cx))
        vb = int(round(intr.fy * cam_b[1] / cam_b[2] + intr.cy))
        if not (0 <= ub < intr.width and 0 <= vb < intr.height):
            continue
        zb = clean_depths[b][vb, ub]
        if zb <= 0 or abs(zb - cam_b[2]) > 0.05:
            continue  # occluded in frame b
        if frames[a].depth[va, ua] <= 0 or frames[b].depth[vb, ub] <= 0:
            continue
        entries.append(
            {"frame_a": a, "u_a": ua, "v_a": va, "frame_b": b, "u_b": ub, "v_b": vb}
        )
    return entries
