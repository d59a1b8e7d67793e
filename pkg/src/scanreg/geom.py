"""Rigid-body and plane math shared by every stage of the registration engine.

Conventions:
    * A rigid transform is parameterized by three Euler angles (z-y-x order,
      i.e. R = Rz(ez) @ Ry(ey) @ Rx(ex)) plus a translation in meters.
    * Transforms act on column points: apply(T, x) = R @ x + t.
    * A plane is an (anchor point, unit normal) pair; it has infinite extent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Rotation-vs-translation exchange rates used by the two scalar deviation
# measures below.  0.25 m^2 makes 1 rad of rotation comparable to 0.5 m.
LAMBDA_ROTATION = 0.25
LAMBDA_NORMAL = 0.25


def _vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(3).copy()
    return v


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """6-DOF pose: Euler angles (ex, ey, ez) in radians and translation in m.

    The rotation matrix is cached on first use (or injected by constructors
    that already computed it) so algebra on poses is numerically stable and
    file round trips reproduce matrices exactly.
    """

    euler: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _rot: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "euler", _vec3(self.euler))
        object.__setattr__(self, "translation", _vec3(self.translation))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def rotation_matrix(self) -> np.ndarray:
        if self._rot is None:
            object.__setattr__(self, "_rot", euler_to_matrix(self.euler))
        return self._rot

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many (n, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate directions without translating."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation_matrix().T


@dataclass(frozen=True)
class Plane:
    """Infinite plane through `point` with unit `normal`."""

    normal: np.ndarray
    point: np.ndarray

    def __post_init__(self):
        n = _vec3(self.normal)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be nonzero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "point", _vec3(self.point))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.point) @ self.normal


def identity() -> RigidTransform:
    return RigidTransform()


def euler_to_matrix(euler: np.ndarray) -> np.ndarray:
    """Rotation matrix for z-y-x Euler angles (ex, ey, ez)."""
    ex, ey, ez = np.asarray(euler, dtype=np.float64)
    cx, sx = np.cos(ex), np.sin(ex)
    cy, sy = np.cos(ey), np.sin(ey)
    cz, sz = np.cos(ez), np.sin(ez)
    return np.array(
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    )


def matrix_to_euler(r: np.ndarray) -> np.ndarray:
    """Recover (ex, ey, ez) with ey in [-pi/2, pi/2]; ex := 0 at gimbal lock."""
    r = np.asarray(r, dtype=np.float64)
    sy = -r[2, 0]
    sy = min(1.0, max(-1.0, sy))
    ey = np.arcsin(sy)
    if abs(sy) < 1.0 - 1e-12:
        ex = np.arctan2(r[2, 1], r[2, 2])
        ez = np.arctan2(r[1, 0], r[0, 0])
    else:
        # cy == 0: only ez -/+ ex is observable.
        ex = 0.0
        ez = np.arctan2(-r[0, 1], r[1, 1])
    return np.array([ex, ey, ez])


def from_matrix(m: np.ndarray) -> RigidTransform:
    """Build a transform from a 3x4 or 4x4 homogeneous matrix."""
    m = np.asarray(m, dtype=np.float64)
    r = m[:3, :3].copy()
    return RigidTransform(matrix_to_euler(r), m[:3, 3], r)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying b then a: compose(a, b)(x) == a(b(x))."""
    ra = a.rotation_matrix()
    rb = b.rotation_matrix()
    r = ra @ rb
    t = ra @ b.translation + a.translation
    return RigidTransform(matrix_to_euler(r), t, r)


def invert(a: RigidTransform) -> RigidTransform:
    r = a.rotation_matrix().T.copy()
    return RigidTransform(matrix_to_euler(r), -(r @ a.translation), r)


def relative(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """invert(b) composed with a, so compose(b, relative(a, b)) == a."""
    return compose(invert(b), a)


def transform_misalignment(
    a: RigidTransform, b: RigidTransform, lambda_rotation: float = LAMBDA_ROTATION
) -> float:
    """Scalar misalignment of two transforms (m^2).

    Squared translation distance plus a weighted squared Frobenius distance
    of the rotation matrices.  Zero iff a == b; symmetric in its arguments.
    """
    dt = a.translation - b.translation
    dr = a.rotation_matrix() - b.rotation_matrix()
    return float(dt @ dt + lambda_rotation * np.sum(dr * dr))


def coplanarity_error(
    a: Plane, b: Plane, lambda_normal: float = LAMBDA_NORMAL
) -> float:
    """Scalar deviation of two planes from being the same plane (m^2).

    Two symmetric point-to-plane offsets plus a weighted squared cross
    product of the normals.  b's normal is sign-flipped first if it opposes
    a's, so oppositely-oriented coincident planes score zero.
    """
    na, nb = a.normal, b.normal
    if float(na @ nb) < 0.0:
        nb = -nb
    d = b.point - a.point
    cr = np.cross(na, nb)
    return float((d @ na) ** 2 + (d @ nb) ** 2 + lambda_normal * (cr @ cr))


def angle_between(n_a: np.ndarray, n_b: np.ndarray) -> float:
    """Angle in [0, pi] between two unit vectors; safe against rounding."""
    dot = float(np.dot(n_a, n_b))
    return float(np.arccos(min(1.0, max(-1.0, dot))))


def rotation_matrices(eulers: np.ndarray) -> np.ndarray:
    """Vectorized euler_to_matrix: (n, 3) angles -> (n, 3, 3)."""
    e = np.asarray(eulers, dtype=np.float64).reshape(-1, 3)
    cx, sx = np.cos(e[:, 0]), np.sin(e[:, 0])
    cy, sy = np.cos(e[:, 1]), np.sin(e[:, 1])
    cz, sz = np.cos(e[:, 2]), np.sin(e[:, 2])
    r = np.empty((e.shape[0], 3, 3))
    r[:, 0, 0] = cz * cy
    r[:, 0, 1] = cz * sy * sx - sz * cx
    r[:, 0, 2] = cz * sy * cx + sz * sx
    r[:, 1, 0] = sz * cy
    r[:, 1, 1] = sz * sy * sx + cz * cx
    r[:, 1, 2] = sz * sy * cx - cz * sx
    r[:, 2, 0] = -sy
    r[:, 2, 1] = cy * sx
    r[:, 2, 2] = cy * cx
    return r


def rotation_derivatives(eulers: np.ndarray) -> np.ndarray:
    """dR/d(ex, ey, ez) for each pose: (n, 3) angles -> (n, 3, 3, 3).

    Output[i, k] is the derivative of R_i with respect to angle k.
    """
    e = np.asarray(eulers, dtype=np.float64).reshape(-1, 3)
    n = e.shape[0]
    cx, sx = np.cos(e[:, 0]), np.sin(e[:, 0])
    cy, sy = np.cos(e[:, 1]), np.sin(e[:, 1])
    cz, sz = np.cos(e[:, 2]), np.sin(e[:, 2])
    d = np.zeros((n, 3, 3, 3))
    # d/dex: R = Rz Ry Rx'(ex)
    d[:, 0, 0, 1] = cz * sy * cx + sz * sx
    d[:, 0, 0, 2] = -cz * sy * sx + sz * cx
    d[:, 0, 1, 1] = sz * sy * cx - cz * sx
    d[:, 0, 1, 2] = -sz * sy * sx - cz * cx
    d[:, 0, 2, 1] = cy * cx
    d[:, 0, 2, 2] = -cy * sx
    # d/dey: R = Rz Ry'(ey) Rx
    d[:, 1, 0, 0] = -cz * sy
    d[:, 1, 0, 1] = cz * cy * sx
    d[:, 1, 0, 2] = cz * cy * cx
    d[:, 1, 1, 0] = -sz * sy
    d[:, 1, 1, 1] = sz * cy * sx
    d[:, 1, 1, 2] = sz * cy * cx
    d[:, 1, 2, 0] = -cy
    d[:, 1, 2, 1] = -sy * sx
    d[:, 1, 2, 2] = -sy * cx
    # d/dez: R = Rz'(ez) Ry Rx
    d[:, 2, 0, 0] = -sz * cy
    d[:, 2, 0, 1] = -sz * sy * sx - cz * cx
    d[:, 2, 0, 2] = -sz * sy * cx + cz * sx
    d[:, 2, 1, 0] = cz * cy
    d[:, 2, 1, 1] = cz * sy * sx - sz * cx
    d[:, 2, 1, 2] = cz * sy * cx + sz * sx
    return d
