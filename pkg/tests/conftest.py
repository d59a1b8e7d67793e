import numpy as np
import pytest

from scanreg.geom import RigidTransform
from scanreg.ingest import DepthFrame, Intrinsics, Room, SyntheticScene


def small_intrinsics(width=64, height=48, f=None):
    f = f if f is not None else 55.0 * width / 64.0
    return Intrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def flat_wall_frame(depth_m=2.0, intr=None, index=0):
    intr = intr or small_intrinsics()
    depth = np.full((intr.height, intr.width), float(depth_m))
    return DepthFrame(index=index, depth=depth, intrinsics=intr)


def one_room_scene(width=64, height=48, noise=(0.0, 0.0), checker=0.25, seed=0, n_segments=None):
    """Camera at room center looking at the +x wall exactly 2 m away."""
    room = Room(min_xy=[0.0, 0.0], max_xy=[3.0, 3.0], height=2.8)
    eye = np.array([1.0, 1.5, 1.4])
    target = np.array([3.0, 1.5, 1.4])
    return SyntheticScene(
        rooms=[room],
        keyframes=[(eye, target), (eye, target)],
        frames_per_segment=[1],
        intrinsics=small_intrinsics(width, height),
        noise=noise,
        checker=checker,
        seed=seed,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pose(rng, rot=0.5, trans=1.0):
    return RigidTransform(rng.uniform(-rot, rot, 3), rng.uniform(-trans, trans, 3))
