import numpy as np
import pytest

from scanreg.trajectory import Trajectory, TrajectoryFormatError, load_trajectory, save_trajectory

from conftest import random_pose


def test_native_round_trip_is_exact(tmp_path, rng):
    traj = Trajectory(poses=[random_pose(rng) for _ in range(10)], meta={"config": "abc"})
    path = tmp_path / "traj.txt"
    save_trajectory(traj, path, "native")
    back = load_trajectory(path, "native")
    assert len(back) == 10
    assert back.meta["config"] == "abc"
    for a, b in zip(traj.poses, back.poses):
        assert np.array_equal(a.matrix(), b.matrix())
    # a second save is byte-identical
    path2 = tmp_path / "traj2.txt"
    save_trajectory(back, path2, "native")
    assert path.read_bytes() == path2.read_bytes()


def test_identity_line_format(tmp_path):
    traj = Trajectory(poses=[random_pose(np.random.default_rng(0), rot=0, trans=0)])
    path = tmp_path / "t.txt"
    save_trajectory(traj, path, "native")
    line = path.read_text().strip()
    fields = line.split()
    assert fields[0] == "0"
    assert [float(x) for x in fields[1:]] == [
        1, 0, 0, 0,
        0, 1, 0, 0,
        0, 0, 1, 0,
        0, 0, 0, 1,
    ]


def test_tum_round_trip(tmp_path, rng):
    traj = Trajectory(poses=[random_pose(rng) for _ in range(8)])
    path = tmp_path / "traj_tum.txt"
    save_trajectory(traj, path, "tum")
    back = load_trajectory(path, "tum")
    for a, b in zip(traj.poses, back.poses):
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-6


def test_malformed_reports_line_number(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1\n1 2 3\n")
    with pytest.raises(TrajectoryFormatError, match=":2"):
        load_trajectory(path, "native")
