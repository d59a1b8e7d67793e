"""Backprojection of depth frames into oriented 3D points (camera space)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from .frames import DepthFrame


@dataclass
class OrientedPoints:
    """Flat arrays of camera-space surface samples from one frame.

    positions: (n, 3) meters.  normals: (n, 3) unit, oriented toward the
    camera (dot(normal, position) <= 0).  pixels: (n, 2) integer (u, v).
    """

    positions: np.ndarray
    normals: np.ndarray
    pixels: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[0]


def backproject_grid(frame: DepthFrame):
    """Dense (h, w, 3) positions and normals plus a joint validity mask."""
    intr = frame.intrinsics
    depth = frame.depth
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    pts = np.empty((h, w, 3))
    pts[..., 0] = (u[None, :] - intr.cx) / intr.fx * depth
    pts[..., 1] = (v[:, None] - intr.cy) / intr.fy * depth
    pts[..., 2] = depth
    normals, nvalid = kernels.depth_normals(depth, intr.fx, intr.fy, intr.cx, intr.cy)
    valid = nvalid & (depth > 0)
    return pts, normals, valid


def backproject(frame: DepthFrame) -> OrientedPoints:
    """Valid oriented points only; pixels lacking normal support are omitted."""
    pts, normals, valid = backproject_grid(frame)
    vs, us = np.nonzero(valid)
    pixels = np.stack([us, vs], axis=1)
    return OrientedPoints(positions=pts[vs, us], normals=normals[vs, us], pixels=pixels)
