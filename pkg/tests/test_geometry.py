"""Tests for point clouds, transforms, knn, normals, and Kabsch alignment."""

import numpy as np
import pytest

from attnreg.errors import InsufficientCorrespondenceError, ShapeError, SizeError
from attnreg.geometry import (
    NeighborGraph,
    PointCloud,
    RigidTransform,
    apply_transform,
    compose,
    estimate_normals,
    kabsch,
    knn,
    rotation_angle_deg,
    rotation_from_axis_angle,
)


def random_rotation(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rotation_from_axis_angle(axis, rng.uniform(0.0, 180.0))


def brute_force_knn(points, k):
    pts = np.asarray(points, dtype=np.float64)
    rows = []
    for i in range(len(pts)):
        diff = pts[i][None, :] - pts
        d2 = np.einsum("ij,ij->i", diff, diff)
        d2[i] = np.inf
        rows.append(np.argsort(d2, kind="stable")[:k])
    return np.array(rows)


class TestKnn:
    def test_collinear(self):
        pts = [(0, 0, 0), (1, 0, 0), (3, 0, 0)]
        graph = knn(pts, 1)
        assert graph.indices.tolist() == [[1], [0], [1]]

    def test_unit_square_edges_not_diagonal(self):
        pts = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)]
        graph = knn(pts, 2)
        for i, row in enumerate(graph.indices):
            assert (i + 2) % 4 not in row  # diagonal corner excluded
            assert set(row) == {(i + 1) % 4, (i - 1) % 4}

    def test_matches_brute_force_large(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(1024, 3))
        graph = knn(pts, 20)
        np.testing.assert_array_equal(graph.indices, brute_force_knn(pts, 20))

    @pytest.mark.parametrize("m,k", [(5, 2), (17, 4), (64, 10)])
    def test_matches_brute_force_sizes(self, m, k):
        rng = np.random.default_rng(m * 31 + k)
        pts = rng.uniform(-1, 1, size=(m, 3))
        np.testing.assert_array_equal(knn(pts, k).indices, brute_force_knn(pts, k))

    def test_k_too_large(self):
        with pytest.raises(SizeError):
            knn(np.zeros((4, 3)), 4)

    def test_no_self_neighbors(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(50, 3))
        graph = knn(pts, 6)
        for i, row in enumerate(graph.indices):
            assert i not in row


class TestKabsch:
    def test_identity_on_equal_clouds(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
        t = kabsch(pts, pts)
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(t.translation, 0, atol=1e-12)

    def test_recovers_constructed_transform(self):
        rng = np.random.default_rng(1)
        src = rng.normal(size=(10, 3))
        r90 = rotation_from_axis_angle([0, 0, 1], 90.0)
        t = np.array([1.0, 2.0, 3.0])
        result = kabsch(src, src @ r90.T + t)
        np.testing.assert_allclose(result.rotation, r90, atol=1e-9)
        np.testing.assert_allclose(result.translation, t, atol=1e-9)

    def test_random_recovery_property(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = rng.integers(3, 30)
            src = rng.normal(size=(n, 3))
            if np.linalg.matrix_rank(src - src.mean(axis=0)) < 2:
                continue  # collinear sample, pose not unique
            rot = random_rotation(rng)
            trans = rng.uniform(-1, 1, 3)
            rec = kabsch(src, src @ rot.T + trans)
            assert rotation_angle_deg(rec.rotation.T @ rot) < 1e-7
            np.testing.assert_allclose(rec.translation, trans, atol=1e-9)

    def test_mirrored_correspondences_still_proper(self):
        # coplanar points with a mirror map: best fit would be a reflection
        src = np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0.0]])
        ref = src.copy()
        ref[:, 0] *= -1
        t = kabsch(src, ref)
        assert np.linalg.det(t.rotation) == pytest.approx(1.0, abs=1e-9)

    def test_least_squares_beats_competitors_on_noise(self):
        rng = np.random.default_rng(3)
        src = rng.normal(size=(40, 3))
        rot = random_rotation(rng)
        trans = rng.uniform(-0.5, 0.5, 3)
        ref = src @ rot.T + trans + rng.normal(scale=0.05, size=(40, 3))
        best = kabsch(src, ref)

        def residual(t):
            return np.sum((src @ t.rotation.T + t.translation - ref) ** 2)

        base = residual(best)
        assert base <= residual(RigidTransform(rot, trans)) + 1e-12
        for _ in range(20):
            competitor = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
            assert base <= residual(competitor) + 1e-12

    def test_weighted_pulls_toward_heavy_pairs(self):
        src = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
        ref = src + np.array([1.0, 0, 0])
        ref[3] += np.array([0, 0, 5.0])  # outlier pair
        w = np.array([1.0, 1.0, 1.0, 1e-9])
        t = kabsch(src, ref, weights=w)
        np.testing.assert_allclose(t.translation, [1.0, 0, 0], atol=1e-6)

    def test_too_few_pairs(self):
        with pytest.raises(InsufficientCorrespondenceError):
            kabsch(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_bad_weights(self):
        pts = np.eye(3)
        with pytest.raises(ValueError):
            kabsch(pts, pts, weights=np.zeros(3))
        with pytest.raises(ShapeError):
            kabsch(pts, pts, weights=np.ones(4))


class TestTransforms:
    def test_identity_apply(self):
        rng = np.random.default_rng(4)
        cloud = PointCloud(rng.normal(size=(5, 3)), _unit_rows(rng, 5))
        out = apply_transform(RigidTransform.identity(), cloud)
        np.testing.assert_array_equal(out.positions, cloud.positions)
        np.testing.assert_array_equal(out.normals, cloud.normals)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(6)
        t = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        cloud = PointCloud(rng.normal(size=(8, 3)), _unit_rows(rng, 8))
        back = apply_transform(t.inverse(), apply_transform(t, cloud))
        np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-9)
        np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-9)

    def test_normal_rotation(self):
        cloud = PointCloud([[0.0, 0, 0]], [[0.0, 0, 1]])
        r90x = RigidTransform(rotation_from_axis_angle([1, 0, 0], 90.0), np.zeros(3))
        out = apply_transform(r90x, cloud)
        np.testing.assert_allclose(out.normals[0], [0, -1, 0], atol=1e-9)

    def test_translation_not_applied_to_normals(self):
        cloud = PointCloud([[0.0, 0, 0]], [[1.0, 0, 0]])
        t = RigidTransform(np.eye(3), [5.0, 5.0, 5.0])
        out = apply_transform(t, cloud)
        np.testing.assert_array_equal(out.normals[0], [1, 0, 0])

    def test_compose_identity(self):
        rng = np.random.default_rng(7)
        t = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        c = compose(t, RigidTransform.identity())
        np.testing.assert_allclose(c.rotation, t.rotation, atol=1e-12)
        np.testing.assert_allclose(c.translation, t.translation, atol=1e-12)

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(8)
        t = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        c = compose(t.inverse(), t)
        np.testing.assert_allclose(c.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(c.translation, 0, atol=1e-9)

    def test_two_quarter_rotations(self):
        r45 = RigidTransform(rotation_from_axis_angle([0, 0, 1], 45.0), np.zeros(3))
        r90 = rotation_from_axis_angle([0, 0, 1], 90.0)
        np.testing.assert_allclose(compose(r45, r45).rotation, r90, atol=1e-12)

    def test_compose_matches_sequential_application(self):
        rng = np.random.default_rng(9)
        a = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        b = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        pts = rng.normal(size=(6, 3))
        np.testing.assert_allclose(compose(b, a).apply(pts), b.apply(a.apply(pts)), atol=1e-12)

    def test_rigidity(self):
        rng = np.random.default_rng(10)
        t = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        pts = rng.normal(size=(20, 3))
        moved = t.apply(pts)
        for i in range(5):
            for j in range(5):
                d0 = np.linalg.norm(pts[i] - pts[j])
                d1 = np.linalg.norm(moved[i] - moved[j])
                assert abs(d0 - d1) < 1e-9

    def test_rejects_improper_rotation(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))


class TestEstimateNormals:
    def test_planar_cloud(self):
        rng = np.random.default_rng(11)
        pts = np.column_stack([rng.uniform(-1, 1, 40), rng.uniform(-1, 1, 40), np.zeros(40)])
        normals = estimate_normals(pts, 8)
        np.testing.assert_allclose(np.abs(normals[:, 2]), 1.0, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12)

    def test_sphere_normals_near_radial(self):
        rng = np.random.default_rng(12)
        dirs = rng.normal(size=(500, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        normals = estimate_normals(dirs, 10)
        cosines = np.einsum("ij,ij->i", normals, dirs)
        angles = np.degrees(np.arccos(np.clip(np.abs(cosines), -1, 1)))
        assert np.max(angles) < 15.0
        # orientation rule points them outward on a sphere
        assert np.all(cosines > 0)

    def test_degenerate_patch_fallback(self):
        pts = np.zeros((6, 3))
        pts[5] = [1.0, 0, 0]  # one offset point, the rest identical
        normals = estimate_normals(pts, 4)
        np.testing.assert_array_equal(normals[0], [0, 0, 1])

    def test_always_unit_norm(self):
        rng = np.random.default_rng(13)
        pts = rng.normal(size=(100, 3))
        normals = estimate_normals(pts, 6)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12)

    def test_k_too_small(self):
        with pytest.raises(SizeError):
            estimate_normals(np.zeros((10, 3)), 2)


class TestRotationHelpers:
    def test_angle_of_constructed_rotation(self):
        r = rotation_from_axis_angle([0, 1, 0], 37.5)
        assert rotation_angle_deg(r) == pytest.approx(37.5, abs=1e-10)

    def test_angle_of_identity(self):
        assert rotation_angle_deg(np.eye(3)) == 0.0

    def test_small_angle_accuracy(self):
        r = rotation_from_axis_angle([1, 1, 1], 1e-5)
        assert rotation_angle_deg(r) == pytest.approx(1e-5, rel=1e-6)


class TestCloudValidation:
    def test_mismatched_shapes(self):
        with pytest.raises(ShapeError):
            PointCloud(np.zeros((3, 3)), np.zeros((2, 3)))

    def test_validate_catches_bad_normals(self):
        cloud = PointCloud(np.zeros((1, 3)), [[2.0, 0, 0]])
        with pytest.raises(ValueError):
            cloud.validate()

    def test_neighbor_graph_k(self):
        g = NeighborGraph(np.zeros((4, 2), dtype=np.int64))
        assert g.k == 2


def _unit_rows(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
