import numpy as np
import pytest

from scanreg import geom
from scanreg.features import Keypoints
from scanreg.pairwise import (
    STATUS_FALLBACK,
    STATUS_OK,
    LocalAlignment,
    PairwiseConfig,
    align_pair,
    concatenate,
    fit_rigid,
    load_match_file,
    save_match_file,
)

from conftest import random_pose


def make_keypoints(rng, n=60, frame=0):
    positions = rng.uniform(-1, 1, (n, 3)) + np.array([0, 0, 2.5])
    descriptors = rng.normal(size=(n, 64))
    descriptors /= np.linalg.norm(descriptors, axis=1, keepdims=True)
    pixels = rng.integers(0, 100, (n, 2))
    return Keypoints(frame=frame, positions=positions, descriptors=descriptors, pixels=pixels)


def transformed_copy(kps, t, frame=1):
    return Keypoints(
        frame=frame,
        positions=t.apply(kps.positions),
        descriptors=kps.descriptors.copy(),
        pixels=kps.pixels.copy(),
    )


class TestFitRigid:
    def test_exact_recovery(self, rng):
        t = random_pose(rng)
        src = rng.uniform(-1, 1, (10, 3))
        fit = fit_rigid(src, t.apply(src))
        assert np.abs(fit.matrix() - t.matrix()).max() < 1e-9

    def test_collinear_degenerate(self, rng):
        src = np.outer(np.arange(5.0), np.array([1.0, 2.0, 3.0]))
        assert fit_rigid(src, src + 1.0) is None

    def test_reflection_rejected(self, rng):
        src = rng.uniform(-1, 1, (20, 3))
        dst = src * np.array([1.0, 1.0, -1.0])  # a mirror image
        fit = fit_rigid(src, dst)
        assert np.linalg.det(fit.rotation_matrix()) > 0


class TestAlignPair:
    def test_identical_sets_give_identity(self, rng):
        kps = make_keypoints(rng)
        res = align_pair(kps, transformed_copy(kps, geom.identity()), seed=0)
        assert res.status == STATUS_OK
        assert res.inliers == len(kps)
        assert np.abs(res.transform.matrix() - np.eye(4)).max() < 1e-6

    def test_exact_recovery_of_known_transform(self, rng):
        kps = make_keypoints(rng)
        t = geom.RigidTransform([0.05, -0.02, 0.1], [0.2, -0.1, 0.05])
        moved = transformed_copy(kps, geom.invert(t))  # b = t^-1(a) so a = t(b)
        res = align_pair(kps, moved, seed=0)
        assert res.status == STATUS_OK
        assert np.abs(res.transform.matrix() - t.matrix()).max() < 1e-6

    def test_too_few_matches_falls_back(self, rng):
        kps = make_keypoints(rng, n=2)
        res = align_pair(kps, transformed_copy(kps, geom.identity()), seed=0)
        assert res.status == STATUS_FALLBACK
        assert np.allclose(res.transform.matrix(), np.eye(4))

    def test_deterministic_given_seed(self, rng):
        kps = make_keypoints(rng)
        noisy = transformed_copy(kps, geom.RigidTransform([0, 0, 0.02], [0.1, 0, 0]))
        noisy.positions += rng.normal(0, 0.004, noisy.positions.shape)
        a = align_pair(kps, noisy, seed=4)
        b = align_pair(kps, noisy, seed=4)
        assert np.array_equal(a.transform.matrix(), b.transform.matrix())
        assert a.inliers == b.inliers

    def test_outliers_and_noise_monte_carlo(self):
        hits = 0
        for trial in range(100):
            rng = np.random.default_rng(1000 + trial)
            t = random_pose(rng, rot=0.3, trans=0.5)
            pb = rng.uniform(-1.5, 1.5, (80, 3)) + np.array([0, 0, 2.5])
            pa = t.apply(pb) + rng.normal(0, 0.005, (80, 3))
            # half the matches are wild outliers
            out = rng.random(80) < 0.5
            pa[out] = rng.uniform(-2, 2, (int(out.sum()), 3))
            res = align_pair(None, None, matches=(pa, pb), seed=trial)
            if res.status == STATUS_OK:
                err = np.linalg.norm(res.transform.translation - t.translation)
                if err < 0.01:
                    hits += 1
        assert hits >= 95

    def test_precomputed_match_file(self, tmp_path, rng):
        t = random_pose(rng, rot=0.2, trans=0.3)
        pb = rng.uniform(-1, 1, (30, 3))
        pa = t.apply(pb)
        path = tmp_path / "pair_0_1.json"
        save_match_file(path, 0, 1, pa, pb)
        fa, fb, la, lb = load_match_file(path)
        assert (fa, fb) == (0, 1)
        res = align_pair(None, None, matches=(la, lb), seed=0)
        assert res.status == STATUS_OK
        assert np.abs(res.transform.matrix() - t.matrix()).max() < 1e-6


class TestConcatenate:
    def test_all_identity(self):
        aligns = [LocalAlignment(geom.identity(), 10, STATUS_OK)] * 5
        poses = concatenate(aligns)
        assert len(poses) == 6
        for p in poses:
            assert np.allclose(p.matrix(), np.eye(4))

    def test_telescoping_translation(self):
        step = geom.RigidTransform(translation=[1.0, 0.0, 0.0])
        poses = concatenate([step] * 7)
        for k, p in enumerate(poses):
            assert np.allclose(p.translation, [k, 0, 0], atol=1e-12)

    def test_matches_direct_matrix_product(self, rng):
        aligns = [random_pose(rng) for _ in range(15)]
        poses = concatenate(aligns)
        m = np.eye(4)
        for k, a in enumerate(aligns):
            m = m @ a.matrix()
            assert np.abs(poses[k + 1].matrix() - m).max() < 1e-9

    def test_round_trips_ground_truth(self, rng):
        from scanreg.ingest import DriftModel, perturb_trajectory

        gt = [random_pose(rng) for _ in range(10)]
        rel = perturb_trajectory(gt, DriftModel(), seed=0)
        poses = concatenate(rel)
        # reconstruction is the ground truth expressed in frame 0 coordinates
        to_world = gt[0]
        for p, g in zip(poses, gt):
            assert np.abs(geom.compose(to_world, p).matrix() - g.matrix()).max() < 1e-9
