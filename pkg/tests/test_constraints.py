import numpy as np
import pytest

from scanreg import geom
from scanreg.constraints import (
    CORR_EDGE,
    CORR_PLANE,
    ConstraintConfig,
    Correspondences,
    LeafProxy,
    cluster_coplanar,
    detect_relations,
    dump_constraints,
    find_correspondences,
    first_shared_iteration,
    largest_remainder_allocation,
    leaves_from_patches,
    make_windows,
    ParentProxy,
    relation_weight,
    sample_proxy_fits,
    subsample_correspondences,
    threshold_schedule,
)
from scanreg.features import KIND_CREASE, KIND_PLANAR, FrameFeatures
from scanreg.geom import Plane, RigidTransform, identity

CFG = ConstraintConfig()


class TestWindows:
    def test_basic_layout(self):
        ws = make_windows(8, 4)
        assert [(w.first_frame, w.last_frame) for w in ws] == [(0, 3), (2, 5), (4, 7)]

    def test_terminal_single_window(self):
        ws = make_windows(8, 16)
        assert [(w.first_frame, w.last_frame) for w in ws] == [(0, 7)]

    def test_short_final_window(self):
        ws = make_windows(10, 4)
        assert [(w.first_frame, w.last_frame) for w in ws] == [(0, 3), (2, 5), (4, 7), (6, 9)]

    def test_coverage_and_overlap_brute_force(self):
        for n in (5, 9, 10, 17, 33, 100):
            for length in (2, 3, 4, 8, 16, 200):
                ws = make_windows(n, length)
                covered = np.zeros(n, dtype=bool)
                for w in ws:
                    assert 0 <= w.first_frame <= w.last_frame <= n - 1
                    covered[w.first_frame : w.last_frame + 1] = True
                assert covered.all()
                assert ws[-1].last_frame == n - 1
                if length < n:
                    half = max(1, length // 2)
                    for a, b in zip(ws, ws[1:-1]):
                        shared = a.last_frame - b.first_frame + 1
                        assert shared == length - half


def lifted_leaf(idx, frame, normal, point, inliers=1000):
    return LeafProxy(id=idx, frame=frame, patch=0, plane_cam=Plane(normal, point), inlier_count=inliers)


class TestClusterCoplanar:
    def test_same_wall_merges(self):
        poses = [identity(), identity()]
        leaves = [
            lifted_leaf(0, 0, [0, 0, 1], [0.1, 0.2, 2.0]),
            lifted_leaf(1, 1, [0, 0, 1], [-0.3, 0.1, 2.0]),
        ]
        parents, constraints = cluster_coplanar(leaves, poses, CFG)
        assert len(parents) == 1
        assert sorted(parents[0].children) == [0, 1]
        assert len(constraints) == 2
        assert parents[0].inlier_count == 2000

    def test_perpendicular_walls_stay_apart(self):
        poses = [identity()]
        leaves = [
            lifted_leaf(0, 0, [0, 0, 1], [0, 0, 2.0]),
            lifted_leaf(1, 0, [1, 0, 0], [2.0, 0, 0]),
        ]
        parents, constraints = cluster_coplanar(leaves, poses, CFG)
        assert len(parents) == 2
        assert constraints == []

    def test_noisy_leaves_recover_three_walls(self):
        rng = np.random.default_rng(0)
        walls = [
            (np.array([0, 0, 1.0]), np.array([0, 0, 3.0])),
            (np.array([1.0, 0, 0]), np.array([3.0, 0, 0])),
            (np.array([0, 1.0, 0]), np.array([0, 3.0, 0])),
        ]
        poses = [identity()]
        leaves = []
        for i in range(20):
            n, p = walls[i % 3]
            nn = n + rng.normal(0, 0.01, 3)
            nn /= np.linalg.norm(nn)
            offset = rng.normal(0, 0.005)
            span = rng.uniform(-1, 1, 3)
            span -= (span @ n) * n  # in-plane scatter
            leaves.append(lifted_leaf(i, 0, nn, p + span + offset * n))
        parents, _ = cluster_coplanar(leaves, poses, CFG)
        assert len(parents) == 3
        for parent in parents:
            best = min(
                np.degrees(geom.angle_between(parent.plane.normal, w[0])) for w, in zip(walls)
            )
            assert best < 1.0
            wall = min(walls, key=lambda w: np.degrees(geom.angle_between(parent.plane.normal, w[0])))
            assert abs(float((parent.plane.point - wall[1]) @ wall[0])) < 0.01

    def test_order_independence(self):
        rng = np.random.default_rng(1)
        poses = [identity()]
        leaves = []
        for i in range(12):
            n = np.array([0, 0, 1.0]) if i % 2 == 0 else np.array([1.0, 0, 0])
            p = np.array([0, 0, 2.0]) if i % 2 == 0 else np.array([2.0, 0, 0])
            jitter = rng.normal(0, 0.002, 3)
            leaves.append(lifted_leaf(i, 0, n + jitter, p + rng.normal(0, 0.002, 3)))
        a_parents, a_cons = cluster_coplanar(leaves, poses, CFG)
        perm = list(reversed(leaves))
        b_parents, b_cons = cluster_coplanar(perm, poses, CFG)
        assert [sorted(p.children) for p in a_parents] == [sorted(p.children) for p in b_parents]


class TestRelations:
    def test_relation_weight_peaks_and_falloff(self):
        sigma = np.deg2rad(10)
        assert relation_weight(0.0, "parallel", sigma) == 1.0
        assert relation_weight(np.pi / 2, "orthogonal", sigma) == 1.0
        assert relation_weight(np.pi, "antiparallel", sigma) == 1.0
        assert relation_weight(sigma, "parallel", sigma) == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_relation_weight_monotone_decreasing(self):
        sigma = np.deg2rad(10)
        thetas = np.deg2rad(np.arange(0, 46))
        ws = [relation_weight(t, "parallel", sigma) for t in thetas]
        assert all(b < a for a, b in zip(ws, ws[1:]))
        assert all(0 < w <= 1 for w in ws)

    def make_parents(self, angle_deg):
        n2 = np.array([np.sin(np.deg2rad(angle_deg)), 0, np.cos(np.deg2rad(angle_deg))])
        return [
            ParentProxy(0, Plane([0, 0, 1], [0, 0, 0]), [0], 100, window=0),
            ParentProxy(1, Plane(n2, [1, 1, 1]), [1], 100, window=0),
        ]

    def test_nearly_parallel(self):
        rels = detect_relations(self.make_parents(2.0), CFG)
        assert len(rels) == 1
        assert rels[0].kind == "parallel"
        assert rels[0].weight == pytest.approx(np.exp(-((2 / 10) ** 2) / 2), rel=1e-9)

    def test_midway_angle_emits_nothing(self):
        assert detect_relations(self.make_parents(45.0), CFG) == []

    def test_antiparallel(self):
        rels = detect_relations(self.make_parents(178.0), CFG)
        assert len(rels) == 1
        assert rels[0].kind == "antiparallel"
        assert rels[0].weight == pytest.approx(np.exp(-((2 / 10) ** 2) / 2), rel=1e-9)

    def test_adjacent_windows_paired_but_not_distant(self):
        parents = [
            ParentProxy(0, Plane([0, 0, 1], [0, 0, 0]), [0], 10, window=0),
            ParentProxy(1, Plane([0, 0, 1], [1, 0, 0]), [1], 10, window=1),
            ParentProxy(2, Plane([0, 0, 1], [2, 0, 0]), [2], 10, window=3),
        ]
        rels = detect_relations(parents, CFG)
        pairs = {(r.a, r.b) for r in rels}
        assert (0, 1) in pairs
        assert (1, 2) not in pairs and (0, 2) not in pairs


class TestThresholdSchedule:
    def test_endpoints(self):
        assert threshold_schedule(0, CFG) == (0.5, 45.0)
        assert threshold_schedule(4, CFG) == (0.15, 20.0)
        assert threshold_schedule(10, CFG) == (0.15, 20.0)

    def test_midpoint(self):
        d, a = threshold_schedule(2, CFG)
        assert d == pytest.approx(0.325)
        assert a == pytest.approx(32.5)


def grid_features(frame, n_side=5, z=2.0, kind=KIND_PLANAR, normal=(0, 0, -1.0), spacing=0.2):
    xs = (np.arange(n_side) - n_side // 2) * spacing
    pos = np.array([[x, y, z] for x in xs for y in xs])
    m = pos.shape[0]
    return FrameFeatures(
        frame=frame,
        kinds=np.full(m, kind, dtype=np.uint8),
        positions=pos,
        directions=np.tile(np.asarray(normal, dtype=np.float64), (m, 1)),
        pixels=np.stack([np.arange(m) * 10 % 50, np.arange(m) // 5 * 10], axis=1),
        patch_ids=np.full(m, 0 if kind == KIND_PLANAR else -1, dtype=np.int32),
    )


class TestCorrespondences:
    def test_identical_frames_match_exactly(self):
        feats = [grid_features(0), grid_features(1)]
        poses = [identity(), identity()]
        windows = make_windows(2, 2)
        corr = find_correspondences(feats, windows, poses, [windows], 0, CFG, seed=0)
        assert len(corr) == len(feats[0])
        assert np.array_equal(corr.idx_a, corr.idx_b)
        assert np.all(corr.kind == CORR_PLANE)

    def test_age_gates_threshold(self):
        feats = [grid_features(0), grid_features(1)]
        shifted = RigidTransform(translation=[0.0, 0.0, 0.4])
        poses = [identity(), shifted]
        windows = make_windows(2, 2)
        young = find_correspondences(feats, windows, poses, [windows], 0, CFG, seed=0)
        assert len(young) > 0
        # same pair at age 4: threshold 0.15 < 0.4 gap
        history = [windows] * 5
        old = find_correspondences(feats, windows, poses, history, 4, CFG, seed=0)
        assert len(old) == 0

    def test_angle_gate(self):
        feats = [grid_features(0), grid_features(1, normal=(0, np.sin(1.0), -np.cos(1.0)))]
        poses = [identity(), identity()]  # 57 degrees apart > 45
        windows = make_windows(2, 2)
        corr = find_correspondences(feats, windows, poses, [windows], 0, CFG, seed=0)
        assert len(corr) == 0

    def test_synthetic_window_matches_are_geometrically_close(self):
        from scanreg.features import FeatureConfig, extract_features
        from scanreg.ingest import synth_scene

        from conftest import one_room_scene

        scene = one_room_scene(width=320, height=240)
        scene.keyframes = [
            (np.array([1.0, 1.3, 1.4]), np.array([3.0, 1.5, 1.4])),
            (np.array([1.2, 1.7, 1.5]), np.array([3.0, 1.5, 1.3])),
        ]
        scene.frames_per_segment = [7]
        frames, poses, _ = synth_scene(scene, seed=5)
        # dense planar sampling keeps same-surface matches within the 5 cm bar
        fcfg = FeatureConfig(planar_stride=4, max_features=6000)
        feats = [extract_features(f, fcfg) for f in frames]
        windows = make_windows(len(frames), 8)
        corr = find_correspondences(feats, windows, poses, [windows], 0, CFG, seed=0)
        assert len(corr) >= 50
        good = 0
        for i in range(len(corr)):
            fa, ia = corr.frame_a[i], corr.idx_a[i]
            fb, ib = corr.frame_b[i], corr.idx_b[i]
            wa = poses[fa].apply(feats[fa].positions[ia])
            wb = poses[fb].apply(feats[fb].positions[ib])
            if np.linalg.norm(wa - wb) < 0.05:
                good += 1
        assert good / len(corr) >= 0.9

    def test_brute_force_equivalence_small(self):
        # mutual nearest same-kind matching against exhaustive search
        rng = np.random.default_rng(7)
        pos_a = rng.uniform(-1, 1, (40, 3))
        pos_b = rng.uniform(-1, 1, (40, 3))
        feats = [
            FrameFeatures(
                frame=0,
                kinds=np.zeros(40, dtype=np.uint8),
                positions=pos_a,
                directions=np.tile([0.0, 0.0, -1.0], (40, 1)),
                pixels=np.zeros((40, 2), dtype=np.int64),
                patch_ids=np.zeros(40, dtype=np.int32),
            ),
            FrameFeatures(
                frame=1,
                kinds=np.zeros(40, dtype=np.uint8),
                positions=pos_b,
                directions=np.tile([0.0, 0.0, -1.0], (40, 1)),
                pixels=np.zeros((40, 2), dtype=np.int64),
                patch_ids=np.zeros(40, dtype=np.int32),
            ),
        ]
        poses = [identity(), identity()]
        windows = make_windows(2, 2)
        corr = find_correspondences(feats, windows, poses, [windows], 0, CFG, seed=0)
        got = {(int(a), int(b)) for a, b in zip(corr.idx_a, corr.idx_b)}

        d = np.linalg.norm(pos_a[:, None, :] - pos_b[None, :, :], axis=2)
        expected = set()
        for i in range(40):
            j = int(np.argmin(d[i]))
            if d[i, j] < 0.5 and int(np.argmin(d[:, j])) == i:
                expected.add((i, j))
        assert got == expected

    def test_emitted_matches_satisfy_creation_thresholds(self):
        feats = [grid_features(0), grid_features(1)]
        poses = [identity(), RigidTransform(translation=[0.05, 0.02, 0.1])]
        windows = make_windows(2, 2)
        corr = find_correspondences(feats, windows, poses, [windows], 0, CFG, seed=0)
        max_dist, max_angle = threshold_schedule(0, CFG)
        for i in range(len(corr)):
            wa = poses[corr.frame_a[i]].apply(feats[corr.frame_a[i]].positions[corr.idx_a[i]])
            wb = poses[corr.frame_b[i]].apply(feats[corr.frame_b[i]].positions[corr.idx_b[i]])
            assert np.linalg.norm(wa - wb) < max_dist


class TestSubsample:
    def make_corr(self, count, windows):
        rng = np.random.default_rng(3)
        return Correspondences(
            frame_a=np.zeros(count, dtype=np.int64),
            idx_a=np.arange(count),
            frame_b=np.ones(count, dtype=np.int64),
            idx_b=np.arange(count),
            kind=np.zeros(count, dtype=np.int64),
            window=rng.choice(windows, count),
        )

    def test_under_cap_unchanged(self):
        corr = self.make_corr(50, [0])
        out = subsample_correspondences(corr, n_frames=1, seed=0)
        assert len(out) == 50

    def test_exact_cap(self):
        corr = self.make_corr(100000, [0, 1, 2, 3])
        out = subsample_correspondences(corr, n_frames=100, seed=0)
        assert len(out) == 100 * 100

    def test_stratification_bound(self):
        corr = self.make_corr(50000, [0, 1, 2, 3, 4, 5, 6, 7])
        out = subsample_correspondences(corr, n_frames=100, seed=0)
        global_ratio = len(out) / len(corr)
        for w in range(8):
            before = int((corr.window == w).sum())
            after = int((out.window == w).sum())
            assert after >= before * global_ratio / 2

    def test_deterministic(self):
        corr = self.make_corr(5000, [0, 1])
        a = subsample_correspondences(corr, n_frames=10, seed=9)
        b = subsample_correspondences(corr, n_frames=10, seed=9)
        assert np.array_equal(a.idx_a, b.idx_a)


class TestAllocation:
    def test_largest_remainder_example(self):
        alloc = largest_remainder_allocation(np.array([900.0, 100.0]), 100)
        assert list(alloc) == [90, 10]

    def test_sums_to_total(self, rng):
        for _ in range(20):
            w = rng.uniform(0.1, 10, rng.integers(1, 12))
            total = int(rng.integers(1, 500))
            alloc = largest_remainder_allocation(w, total)
            assert alloc.sum() == total
            assert np.all(alloc >= 0)


def test_first_shared_iteration():
    schedules = [make_windows(16, 4, 0), make_windows(16, 8, 1), make_windows(16, 16, 2)]
    assert first_shared_iteration(0, 1, schedules) == 0
    assert first_shared_iteration(0, 5, schedules) == 1
    assert first_shared_iteration(0, 15, schedules) == 2
    assert first_shared_iteration(14, 15, schedules) == 0


def test_sample_proxy_fits_allocation():
    feats = [grid_features(0)]
    leaves = [lifted_leaf(0, 0, [0, 0, 1], [0, 0, 2.0], inliers=900)]
    # second leaf with its own patch id 1 and few planar features
    f2 = grid_features(0)
    f2.patch_ids[:] = 1
    feats.append(f2)
    leaves.append(LeafProxy(id=1, frame=1, patch=1, plane_cam=Plane([0, 0, 1], [0, 0, 2]), inlier_count=100))
    parents = [
        ParentProxy(2, Plane([0, 0, 1], [0, 0, 2]), [0], 900, window=0),
        ParentProxy(3, Plane([0, 0, 1], [0, 0, 2]), [1], 100, window=0),
    ]
    fits = sample_proxy_fits(parents, leaves, feats, n_frames=1, seed=0, per_frame=20)
    counts = np.bincount(fits.proxy, minlength=2)
    assert counts[0] == 18 and counts[1] == 2


def test_dump_constraints_jsonl(tmp_path):
    import json

    feats = [grid_features(0), grid_features(1)]
    poses = [identity(), identity()]
    windows = make_windows(2, 2)
    corr = find_correspondences(feats, windows, poses, [windows], 0, CFG, seed=0)
    leaves = [lifted_leaf(0, 0, [0, 0, 1], [0, 0, 2.0])]
    parents, cop = cluster_coplanar(leaves, poses, CFG, id_start=1)
    from scanreg.constraints import ConstraintSet, ProxyFitSamples

    cset = ConstraintSet(
        leaves=leaves,
        parents=parents,
        coplanarity=cop,
        relations=detect_relations(parents, CFG),
        correspondences=corr,
        proxy_fits=ProxyFitSamples(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        ),
        iteration=3,
    )
    path = tmp_path / "constraints.jsonl"
    dump_constraints(path, cset)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 1 + len(corr)  # 1 proxy + matches
    for line in lines:
        doc = json.loads(line)
        assert doc["iteration"] == 3
