"""Trajectory container and interchange formats.

Native format: one line per frame, "index" followed by the 16 row-major
entries of the 4x4 pose matrix, at full precision (lossless round trip).
A TUM-style export ("index tx ty tz qx qy qz qw") is provided for external
evaluation tools.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import RigidTransform, from_matrix


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    poses: list[RigidTransform]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, k: int) -> RigidTransform:
        return self.poses[k]

    def as_arrays(self):
        """(eulers (n, 3), translations (n, 3)) views of the poses."""
        e = np.array([p.euler for p in self.poses]).reshape(-1, 3)
        t = np.array([p.translation for p in self.poses]).reshape(-1, 3)
        return e, t


def _quat_from_matrix(r: np.ndarray) -> np.ndarray:
    """(qx, qy, qz, qw) with qw >= 0."""
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        qw = 0.25 * s
        qx = (r[2, 1] - r[1, 2]) / s
        qy = (r[0, 2] - r[2, 0]) / s
        qz = (r[1, 0] - r[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            qw = (r[2, 1] - r[1, 2]) / s
            qx = 0.25 * s
            qy = (r[0, 1] + r[1, 0]) / s
            qz = (r[0, 2] + r[2, 0]) / s
        elif i == 1:
            s = np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2
            qw = (r[0, 2] - r[2, 0]) / s
            qx = (r[0, 1] + r[1, 0]) / s
            qy = 0.25 * s
            qz = (r[1, 2] + r[2, 1]) / s
        else:
            s = np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2
            qw = (r[1, 0] - r[0, 1]) / s
            qx = (r[0, 2] + r[2, 0]) / s
            qy = (r[1, 2] + r[2, 1]) / s
            qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _matrix_from_quat(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def save_trajectory(traj: Trajectory, path, fmt: str = "native") -> None:
    if fmt not in ("native", "tum"):
        raise TrajectoryFormatError(f"unknown trajectory format {fmt!r}")
    lines = []
    if traj.meta:
        for key in sorted(traj.meta):
            lines.append(f"# {key}={traj.meta[key]}")
    for k, pose in enumerate(traj.poses):
        m = pose.matrix()
        if fmt == "native":
            vals = " ".join(repr(float(x)) for x in m.ravel())
            lines.append(f"{k} {vals}")
        else:
            q = _quat_from_matrix(m[:3, :3])
            t = m[:3, 3]
            vals = " ".join(repr(float(x)) for x in (*t, *q))
            lines.append(f"{k} {vals}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_trajectory(path, fmt: str = "native") -> Trajectory:
    if fmt not in ("native", "tum"):
        raise TrajectoryFormatError(f"unknown trajectory format {fmt!r}")
    poses = []
    meta = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if val:
                    meta[key.strip()] = val.strip()
                continue
            parts = line.split()
            want = 17 if fmt == "native" else 8
            if len(parts) != want:
                raise TrajectoryFormatError(
                    f"{path}:{lineno}: expected {want} fields, got {len(parts)}"
                )
            try:
                vals = [float(x) for x in parts[1:]]
            except ValueError as e:
                raise TrajectoryFormatError(f"{path}:{lineno}: {e}") from None
            if fmt == "native":
                m = np.array(vals).reshape(4, 4)
                poses.append(from_matrix(m))
            else:
                t = np.array(vals[0:3])
                r = _matrix_from_quat(np.array(vals[3:7]))
                m = np.eye(4)
                m[:3, :3] = r
                m[:3, 3] = t
                poses.append(from_matrix(m))
    return Trajectory(poses=poses, meta=meta)
