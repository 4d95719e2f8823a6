"""Tests for the synthetic pair generator and its experiment regimes."""

import numpy as np
import pytest

from attnreg.datagen import (
    GroundTruthMatrix,
    ModelEntry,
    PairConfig,
    add_noise,
    crop_plane,
    establish_correspondences,
    example_rng,
    make_pair,
    random_transform,
    split_categories,
    toy_models,
    toy_shape,
)
from attnreg.errors import ConfigError, SizeError
from attnreg.geometry import PointCloud, RigidTransform, rotation_angle_deg


@pytest.fixture(scope="module")
def blob():
    return toy_shape(seed=7, n_points=200)


class TestRandomTransform:
    def test_zero_ranges_give_identity(self):
        t = random_transform(0.0, 0.0, example_rng(0))
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_array_equal(t.translation, 0.0)

    def test_bounds_over_many_samples(self):
        rng = example_rng(1)
        for _ in range(10_000):
            t = random_transform(80.0, 0.5, rng)
            assert rotation_angle_deg(t.rotation) <= 80.0 + 1e-9
            assert np.all(np.abs(t.translation) <= 0.5)

    def test_fixed_seed_bit_identical(self):
        a = random_transform(80.0, 0.5, example_rng(42))
        b = random_transform(80.0, 0.5, example_rng(42))
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)

    def test_angle_distribution_reaches_extremes(self):
        rng = example_rng(2)
        angles = [rotation_angle_deg(random_transform(80.0, 0.5, rng).rotation)
                  for _ in range(2000)]
        assert max(angles) > 75.0 and min(angles) < 5.0


class TestCropPlane:
    def test_fraction_one_unchanged(self, blob):
        out = crop_plane(blob, 1.0, example_rng(3))
        np.testing.assert_array_equal(out.positions, blob.positions)

    def test_keeps_exactly_floor_fraction(self):
        cloud = toy_shape(seed=9, n_points=1024)
        out = crop_plane(cloud, 0.7, example_rng(4))
        assert len(out) == 716

    def test_halfspace_property(self, blob):
        # replicate the plane draw, then check retained vs dropped split
        rng = example_rng(5)
        out = crop_plane(blob, 0.6, rng)
        kept = {tuple(p) for p in out.positions}
        rng2 = example_rng(5)
        normal = rng2.normal(size=3)
        normal /= np.linalg.norm(normal)
        signed = (blob.positions - blob.positions.mean(axis=0)) @ normal
        kept_mask = np.array([tuple(p) in kept for p in blob.positions])
        assert signed[kept_mask].min() >= signed[~kept_mask].max()

    def test_order_preserved(self, blob):
        out = crop_plane(blob, 0.5, example_rng(6))
        idx = [np.flatnonzero((blob.positions == p).all(axis=1))[0] for p in out.positions]
        assert idx == sorted(idx)

    def test_bad_fraction(self, blob):
        with pytest.raises(ConfigError):
            crop_plane(blob, 0.0, example_rng(7))


class TestAddNoise:
    def test_sigma_zero_positions_unchanged(self, blob):
        out = add_noise(blob, 0.0, 0.05, example_rng(8))
        np.testing.assert_array_equal(out.positions, blob.positions)

    def test_offsets_within_clip(self, blob):
        rng = example_rng(9)
        for _ in range(50):
            out = add_noise(blob, 0.01, 0.05, rng)
            assert np.max(np.abs(out.positions - blob.positions)) <= 0.05

    def test_unclipped_std_near_sigma(self):
        rng = example_rng(10)
        cloud = PointCloud(np.zeros((40_000, 3)), np.tile((0.0, 0, 1), (40_000, 1)))
        out = add_noise(cloud, 0.01, 1.0, rng, normal_neighbors=0)
        std = np.std(out.positions - cloud.positions)
        assert abs(std - 0.01) / 0.01 < 0.1

    def test_normals_reestimated_unit(self, blob):
        out = add_noise(blob, 0.01, 0.05, example_rng(11))
        np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-9)


class TestEstablishCorrespondences:
    def test_exact_transformed_copy_identity(self, blob):
        gt = random_transform(60.0, 0.4, example_rng(12))
        reference = PointCloud(gt.apply(blob.positions), blob.normals @ gt.rotation.T)
        matrix = establish_correspondences(blob, reference, gt, 0.05)
        matrix.validate()
        assert matrix.match_pairs() == [(i, i) for i in range(len(blob))]

    def test_all_slack_when_far(self):
        a = PointCloud(np.zeros((4, 3)) + [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
                       np.tile((0.0, 0, 1), (4, 1)))
        b = PointCloud(a.positions + 10.0, a.normals)
        matrix = establish_correspondences(a, b, RigidTransform.identity(), 0.05)
        matrix.validate()
        assert matrix.match_pairs() == []
        assert matrix.entries[:4, 4].sum() == 4  # all source rows in slack

    def test_three_point_chain_hand_case(self):
        # source points at 0, 1, 2 on the x axis; reference at 0.01, 0.02, 5
        # mutual NN: s0<->r0 (0.01). chain: s1 best remaining r1 at 0.98
        src = PointCloud([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]],
                         np.tile((0.0, 0, 1), (3, 1)))
        ref = PointCloud([[0.01, 0, 0], [0.02, 0, 0], [5.0, 0, 0]],
                         np.tile((0.0, 0, 1), (3, 1)))
        matrix = establish_correspondences(src, ref, RigidTransform.identity(), 1.5)
        matrix.validate()
        assert set(matrix.match_pairs()) == {(0, 0), (1, 1)}

    def test_one_to_one(self, blob):
        gt = random_transform(30.0, 0.2, example_rng(13))
        noisy = add_noise(blob, 0.01, 0.05, example_rng(14))
        reference = PointCloud(gt.apply(noisy.positions), noisy.normals @ gt.rotation.T)
        matrix = establish_correspondences(blob, reference, gt, 0.05)
        matrix.validate()
        pairs = matrix.match_pairs()
        assert len({i for i, _ in pairs}) == len(pairs)
        assert len({j for _, j in pairs}) == len(pairs)

    def test_matched_pairs_within_max_dist(self, blob):
        gt = random_transform(45.0, 0.3, example_rng(15))
        noisy = add_noise(blob, 0.02, 0.05, example_rng(16))
        reference = PointCloud(gt.apply(noisy.positions), noisy.normals @ gt.rotation.T)
        matrix = establish_correspondences(blob, reference, gt, 0.05)
        aligned = gt.apply(blob.positions)
        for i, j in matrix.match_pairs():
            assert np.linalg.norm(aligned[i] - reference.positions[j]) <= 0.05


class TestMakePair:
    def test_clean_full_matches(self, blob):
        cfg = PairConfig(points_per_cloud=64, regime="clean", seed=1)
        ex = make_pair(blob, cfg, label="blob")
        ex.gt_matrix.validate()
        assert len(ex.gt_matrix.match_pairs()) == 64
        assert len(ex.source) == len(ex.reference) == 64
        aligned = ex.gt_transform.apply(ex.source.positions)
        np.testing.assert_allclose(aligned, ex.reference.positions, atol=1e-12)

    def test_crop_sizes(self):
        model = toy_shape(seed=20, n_points=2048)
        cfg = PairConfig(points_per_cloud=1024, regime="crop", seed=2)
        ex = make_pair(model, cfg)
        assert len(ex.source) == 716 and len(ex.reference) == 716
        ex.gt_matrix.validate()
        assert len(ex.gt_matrix.match_pairs()) >= 1

    def test_noise_regime_has_slack(self, blob):
        cfg = PairConfig(points_per_cloud=64, regime="noise", seed=3)
        ex = make_pair(blob, cfg)
        ex.gt_matrix.validate()
        matches = len(ex.gt_matrix.match_pairs())
        assert 0 < matches < 64  # independent subsets leave unmatched points

    def test_same_seed_bit_identical(self, blob):
        cfg = PairConfig(points_per_cloud=64, regime="crop", seed=4)
        a = make_pair(blob, cfg)
        b = make_pair(blob, cfg)
        np.testing.assert_array_equal(a.source.positions, b.source.positions)
        np.testing.assert_array_equal(a.reference.positions, b.reference.positions)
        np.testing.assert_array_equal(a.gt_matrix.entries, b.gt_matrix.entries)
        np.testing.assert_array_equal(a.gt_transform.rotation, b.gt_transform.rotation)

    def test_model_too_small(self, blob):
        with pytest.raises(SizeError):
            make_pair(blob, PairConfig(points_per_cloud=500, seed=0))

    def test_relaxed_constraints_hold(self, blob):
        for seed in range(10):
            cfg = PairConfig(points_per_cloud=64, regime="crop", seed=seed)
            ex = make_pair(blob, cfg)
            block = ex.gt_matrix.entries[:-1, :-1]
            assert np.all(block.sum(axis=1) <= 1)
            assert np.all(block.sum(axis=0) <= 1)


class TestSplitCategories:
    def _entries(self, categories, per_cat=2, with_test=True):
        entries = []
        for c in range(1, categories + 1):
            for i in range(per_cat):
                cloud = toy_shape(seed=c * 10 + i, n_points=32)
                entries.append(ModelEntry(cloud, f"cat{c}", "train"))
                if with_test:
                    entries.append(ModelEntry(cloud, f"cat{c}", "test"))
        return entries

    def test_unseen_four_categories(self):
        train, val, test = split_categories(self._entries(4), "unseen")
        assert {e.label for e in train} == {"cat1", "cat2"}
        assert {e.label for e in val} == {"cat1", "cat2"}
        assert all(e.subset == "test" for e in val)
        assert {e.label for e in test} == {"cat3", "cat4"}

    def test_official_disjoint_by_item(self):
        entries = self._entries(3)
        train, val, test = split_categories(entries, "official")
        assert not (set(map(id, train)) & set(map(id, test)))
        assert not (set(map(id, train)) & set(map(id, val)))
        assert len(train) + len(val) == sum(1 for e in entries if e.subset == "train")
        assert len(train) == int(np.floor(0.8 * (len(train) + len(val))))

    def test_unseen_needs_two_categories(self):
        with pytest.raises(ConfigError):
            split_categories(self._entries(1), "unseen")


class TestToyShapes:
    def test_within_unit_sphere(self):
        for seed in range(5):
            cloud = toy_shape(seed, 100)
            assert np.max(np.linalg.norm(cloud.positions, axis=1)) <= 1.0 + 1e-12
            cloud.validate()

    def test_models_labelled(self):
        models = toy_models(3, n_points=64)
        assert [m.label for m in models] == ["shape00", "shape01", "shape02"]

    def test_distinct_shapes(self):
        a = toy_shape(0, 64)
        b = toy_shape(1, 64)
        assert not np.allclose(a.positions, b.positions)
