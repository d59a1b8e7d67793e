"""scanreg: offline global registration of RGB-D scan sequences."""

__version__ = "0.1.0"

from .geom import Plane, RigidTransform  # noqa: F401
