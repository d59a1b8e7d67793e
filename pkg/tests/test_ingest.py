import numpy as np
import pytest

from scanreg import geom
from scanreg.ingest import (
    DepthFrame,
    DriftModel,
    IngestError,
    SceneError,
    backproject,
    backproject_grid,
    decode_depth,
    encode_depth,
    ground_truth_poses,
    load_depth,
    load_intrinsics,
    perturb_trajectory,
    plant_benchmark,
    save_depth,
    save_intrinsics,
    scene_from_json,
    synth_scene,
)

from conftest import flat_wall_frame, one_room_scene, small_intrinsics


class TestDepthIO:
    def test_millimeter_decode(self):
        raw = np.array([[1000, 0, 2500]], dtype=np.uint16)
        m = decode_depth(raw, "millimeters")
        assert m[0, 0] == 1.0
        assert m[0, 1] == 0.0
        assert m[0, 2] == 2.5

    def test_out_of_range_is_invalid(self):
        raw = np.array([[13000]], dtype=np.uint16)  # beyond 12 m
        assert decode_depth(raw, "millimeters")[0, 0] == 0.0

    def test_shift_mode_round_trips_all_raw_values(self):
        raw = np.arange(65536, dtype=np.uint16)
        from scanreg.ingest.frames import _rotl3, _rotr3

        assert np.array_equal(_rotr3(_rotl3(raw)), raw)
        assert np.array_equal(_rotl3(_rotr3(raw)), raw)

    def test_shift_mode_encode_decode_known_depth(self):
        depth = np.array([[1.234, 0.0, 3.0]])
        raw = encode_depth(depth, "sun3d_shift")
        back = decode_depth(raw, "sun3d_shift")
        assert np.allclose(back[0, [0, 2]], [1.234, 3.0], atol=5e-4)
        assert back[0, 1] == 0.0

    def test_png_round_trip(self, tmp_path):
        intr = small_intrinsics(width=8, height=6)
        rng = np.random.default_rng(0)
        depth = rng.uniform(0.5, 8.0, (6, 8))
        depth[0, 0] = 0.0
        for mode in ("millimeters", "sun3d_shift"):
            path = tmp_path / f"d_{mode}.png"
            save_depth(path, depth, mode)
            frame = load_depth(path, mode, intr, index=3)
            assert frame.index == 3
            assert np.abs(frame.depth - depth).max() < 5e-4
            assert frame.depth[0, 0] == 0.0

    def test_size_mismatch_reports_dimensions(self, tmp_path):
        path = tmp_path / "d.png"
        save_depth(path, np.ones((6, 8)), "millimeters")
        with pytest.raises(IngestError, match="8x6"):
            load_depth(path, "millimeters", small_intrinsics(width=10, height=6))

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"not a png")
        with pytest.raises(IngestError, match="cannot read"):
            load_depth(path, "millimeters", small_intrinsics())

    def test_intrinsics_file_round_trip(self, tmp_path):
        intr = small_intrinsics()
        path = tmp_path / "intr.txt"
        save_intrinsics(path, intr)
        assert load_intrinsics(path) == intr


class TestBackproject:
    def test_flat_wall_normals_face_camera(self):
        pts = backproject(flat_wall_frame(2.0))
        assert len(pts) > 0
        angles = np.degrees(np.arccos(np.clip(-pts.normals[:, 2], -1, 1)))
        assert angles.max() < 1.0
        assert np.all(np.sum(pts.normals * pts.positions, axis=1) <= 1e-12)

    def test_principal_ray(self):
        intr = small_intrinsics()
        frame = flat_wall_frame(3.5, intr)
        pts, _, _ = backproject_grid(frame)
        center = pts[int(intr.cy), int(intr.cx)]
        assert np.allclose(center, [0, 0, 3.5], atol=1e-12)

    def test_all_invalid_frame_is_empty(self):
        frame = flat_wall_frame(2.0)
        frame.depth[:] = 0.0
        assert len(backproject(frame)) == 0

    def test_sphere_normals_match_analytic(self):
        intr = small_intrinsics(width=96, height=96, f=120.0)
        center = np.array([0.0, 0.0, 2.0])
        radius = 0.8
        u = np.arange(intr.width) - intr.cx
        v = np.arange(intr.height) - intr.cy
        dx = u[None, :] / intr.fx
        dy = v[:, None] / intr.fy
        # solve |t*(dx,dy,1) - c|^2 = r^2 for the near root (z-depth = t)
        aa = dx**2 + dy**2 + 1.0
        bb = -2.0 * (dx * center[0] + dy * center[1] + center[2])
        cc = center @ center - radius**2
        disc = bb**2 - 4 * aa * cc
        depth = np.where(disc > 0, (-bb - np.sqrt(np.maximum(disc, 0))) / (2 * aa), 0.0)
        frame = DepthFrame(index=0, depth=depth, intrinsics=intr)
        pts = backproject(frame)
        analytic = (pts.positions - center) / radius
        cos = np.sum(pts.normals * analytic, axis=1)
        angles = np.degrees(np.arccos(np.clip(cos, -1, 1)))
        assert np.quantile(angles, 0.95) < 3.0


class TestSynthetic:
    def test_center_pixel_depth_exact(self):
        scene = one_room_scene(noise=(0.0, 0.0))
        frames, poses, _ = synth_scene(scene, seed=1)
        intr = scene.intrinsics
        d = frames[0].depth[int(intr.cy), int(intr.cx)]
        assert d == pytest.approx(2.0, abs=1e-9)

    def test_determinism(self):
        scene_a = one_room_scene(noise=(0.001, 0.002))
        frames_a, _, _ = synth_scene(scene_a, seed=9)
        scene_b = one_room_scene(noise=(0.001, 0.002))
        frames_b, _, _ = synth_scene(scene_b, seed=9)
        for fa, fb in zip(frames_a, frames_b):
            assert np.array_equal(fa.depth, fb.depth)
            assert np.array_equal(fa.gray, fb.gray)

    def test_noise_statistics(self):
        scene = one_room_scene(width=400, height=300, noise=(0.001, 0.002))
        frames, _, clean = synth_scene(scene, seed=3)
        sel = clean[0] == 2.0  # fronto-parallel wall pixels at exactly z=2
        assert sel.sum() > 1e5 * 0.5
        noise = frames[0].depth[sel] - 2.0
        expected = 0.001 + 0.002 * 4.0
        assert np.std(noise) == pytest.approx(expected, rel=0.05)

    def test_backprojected_wall_within_noise_band(self):
        scene = one_room_scene(width=200, height=150, noise=(0.001, 0.002))
        frames, _, clean = synth_scene(scene, seed=4)
        pts, _, valid = backproject_grid(frames[0])
        sel = (clean[0] == 2.0) & valid
        z = pts[..., 2][sel]
        sigma = 0.001 + 0.002 * 4.0
        frac = np.mean(np.abs(z - 2.0) < 3 * sigma)
        assert frac >= 0.99

    def test_pose_outside_rooms_rejected(self):
        scene = one_room_scene()
        scene.keyframes = [(np.array([5.0, 5.0, 1.0]), np.array([6.0, 5.0, 1.0]))] * 2
        with pytest.raises(SceneError, match="frame 0"):
            ground_truth_poses(scene)

    def test_scene_json_parsing_and_errors(self):
        good = """{
            "rooms": [{"min": [0, 0], "max": [3, 3], "height": 2.8}],
            "trajectory": {"keyframes": [
                {"position": [1, 1.5, 1.4], "look_at": [3, 1.5, 1.4]},
                {"position": [1.5, 1.5, 1.4], "look_at": [3, 1.5, 1.4]}],
                "frames_per_segment": [4]},
            "intrinsics": {"fx": 55, "fy": 55, "cx": 32, "cy": 24, "width": 64, "height": 48},
            "noise": {"a": 0.001, "b": 0.002},
            "seed": 7
        }"""
        scene = scene_from_json(good)
        assert len(scene.rooms) == 1 and scene.noise == (0.001, 0.002)
        frames, poses, _ = synth_scene(scene)
        assert len(frames) == len(poses) == 5

        bad = good.replace('"max": [3, 3],', '"max": [0, 0],')
        with pytest.raises(SceneError, match="/rooms/0"):
            scene_from_json(bad)


class TestPerturb:
    def path_poses(self, n=11):
        poses = []
        for k in range(n):
            poses.append(geom.RigidTransform([0, 0, 0], [0.1 * k, 0.0, 1.0]))
        return poses

    def test_zero_noise_reproduces_relatives(self):
        poses = self.path_poses()
        l = perturb_trajectory(poses, DriftModel(), seed=0)
        assert len(l) == len(poses) - 1
        for k, t in enumerate(l):
            expect = geom.relative(poses[k + 1], poses[k])
            assert np.abs(t.matrix() - expect.matrix()).max() < 1e-12

    def test_same_seed_reproducible(self):
        poses = self.path_poses()
        drift = DriftModel(rot_noise=0.01, trans_noise=0.01)
        l1 = perturb_trajectory(poses, drift, seed=5)
        l2 = perturb_trajectory(poses, drift, seed=5)
        for a, b in zip(l1, l2):
            assert np.array_equal(a.euler, b.euler)
            assert np.array_equal(a.translation, b.translation)

    def test_yaw_bias_accumulates(self):
        # static camera, pure heading bias: after 500 steps the concatenated
        # orientation error is 500 * 0.1 degrees
        poses = [geom.identity() for _ in range(501)]
        bias = np.deg2rad(0.1)
        drift = DriftModel(rot_bias=[0.0, bias, 0.0])
        l = perturb_trajectory(poses, drift, seed=0)
        acc = geom.identity()
        for t in l:
            acc = geom.compose(acc, t)
        heading = np.degrees(np.arctan2(-acc.rotation_matrix()[2, 0], acc.rotation_matrix()[0, 0]))
        assert heading == pytest.approx(50.0, abs=1e-6)


class TestBenchmarkPlanting:
    def test_planting_on_two_frame_scene(self):
        scene = one_room_scene(width=96, height=72)
        scene.keyframes = [
            (np.array([1.0, 1.5, 1.4]), np.array([3.0, 1.5, 1.4])),
            (np.array([1.2, 1.5, 1.4]), np.array([3.0, 1.6, 1.4])),
        ]
        scene.frames_per_segment = [1]
        frames, poses, clean = synth_scene(scene, seed=6)
        entries = plant_benchmark(frames, poses, clean, count=40, offsets=(1,), seed=2)
        assert len(entries) == 40
        intr = scene.intrinsics
        for e in entries:
            a, b = e["frame_a"], e["frame_b"]
            za = clean[a][e["v_a"], e["u_a"]]
            zb = clean[b][e["v_b"], e["u_b"]]
            pa = poses[a].apply(
                [(e["u_a"] - intr.cx) / intr.fx * za, (e["v_a"] - intr.cy) / intr.fy * za, za]
            )
            pb = poses[b].apply(
                [(e["u_b"] - intr.cx) / intr.fx * zb, (e["v_b"] - intr.cy) / intr.fy * zb, zb]
            )
            # integer-pixel rounding keeps endpoints within a couple of cm
            assert np.linalg.norm(pa - pb) < 0.08
