"""Core 3D geometry: point clouds, rigid transforms, neighbors, normals, alignment.

All operations are pure functions on float64 numpy arrays and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientCorrespondenceError, ShapeError, SizeError

_ORTHO_TOL = 1e-6
_UNIT_TOL = 1e-6


@dataclass
class PointCloud:
    """Positions plus unit normals, one row per point."""

    positions: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeError(f"positions must be (M, 3), got {self.positions.shape}")
        if self.normals.shape != self.positions.shape:
            raise ShapeError(
                f"normals shape {self.normals.shape} does not match positions "
                f"{self.positions.shape}"
            )
        if len(self.positions) < 1:
            raise SizeError("point cloud must contain at least one point")

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(self.positions[idx].copy(), self.normals[idx].copy())

    def validate(self) -> None:
        """Check the unit-normal invariant (1e-6 tolerance)."""
        norms = np.linalg.norm(self.normals, axis=1)
        if not np.all(np.abs(norms - 1.0) <= _UNIT_TOL):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(f"normal {worst} has norm {norms[worst]}, expected 1")


@dataclass(frozen=True)
class RigidTransform:
    """p -> rotation @ p + translation, with rotation in SO(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (M, 3) array of positions."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class NeighborGraph:
    """Row i lists the k nearest neighbors of point i, self excluded."""

    indices: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact squared distances computed as sums of squared differences.

    Blocked over rows of `a` to bound memory; arithmetic is identical to the
    naive per-pair formula, so results match a brute-force scan bit for bit.
    """
    out = np.empty((len(a), len(b)), dtype=np.float64)
    for start in range(0, len(a), chunk):
        stop = min(start + chunk, len(a))
        diff = a[start:stop, None, :] - b[None, :, :]
        out[start:stop] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def knn(points, k: int) -> NeighborGraph:
    """k nearest neighbors per point (self excluded), ties broken by lower index."""
    pts = np.asarray(points, dtype=np.float64)
    m = len(pts)
    if k < 1:
        raise SizeError(f"k must be positive, got {k}")
    if k >= m:
        raise SizeError(f"k={k} requires more than {m} points")
    d2 = _pairwise_sq_dists(pts, pts)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return NeighborGraph(order[:, :k].astype(np.int64))


def kabsch(src, ref, weights=None) -> RigidTransform:
    """Least-squares rigid alignment of src onto ref via SVD.

    Minimizes sum of w_i * ||R src_i + t - ref_i||^2; the reflection case is
    corrected by flipping the smallest singular direction so det(R) = +1.
    """
    s = np.asarray(src, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 3 or s.shape != r.shape:
        raise ShapeError(f"expected matching (N, 3) arrays, got {s.shape} and {r.shape}")
    n = len(s)
    if n < 3:
        raise InsufficientCorrespondenceError(f"need at least 3 pairs, got {n}")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ShapeError(f"weights must have shape ({n},), got {w.shape}")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights must sum to a positive value")
        w = w / total
    centroid_s = w @ s
    centroid_r = w @ r
    x = s - centroid_s
    y = r - centroid_r
    h = (x * w[:, None]).T @ y
    u, _, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    if sign == 0:
        sign = 1.0
    rotation = (vt.T * np.array([1.0, 1.0, sign])) @ u.T
    translation = centroid_r - rotation @ centroid_s
    return RigidTransform(rotation, translation)


def apply_transform(transform: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Map positions by R p + t and normals by R n."""
    return PointCloud(
        transform.apply(cloud.positions),
        cloud.normals @ transform.rotation.T,
    )


def compose(second: RigidTransform, first: RigidTransform) -> RigidTransform:
    """Transform applying `first` then `second`."""
    return RigidTransform(
        second.rotation @ first.rotation,
        second.rotation @ first.translation + second.translation,
    )


def estimate_normals(points, k: int) -> np.ndarray:
    """Per-point unit normals from a local plane fit over the k-neighborhood.

    The normal is the eigenvector of the smallest eigenvalue of the patch
    covariance (point plus its k neighbors), oriented away from the cloud
    centroid. Degenerate (zero-spread) patches fall back to (0, 0, 1).
    """
    pts = np.asarray(points, dtype=np.float64)
    m = len(pts)
    if k < 3:
        raise SizeError(f"normal estimation needs k >= 3, got {k}")
    graph = knn(pts, k)
    centroid = pts.mean(axis=0)
    normals = np.empty((m, 3), dtype=np.float64)
    for i in range(m):
        patch = pts[np.concatenate(([i], graph.indices[i]))]
        centered = patch - patch.mean(axis=0)
        cov = centered.T @ centered
        if np.max(np.abs(cov)) < 1e-18:
            normals[i] = (0.0, 0.0, 1.0)
            continue
        _, vecs = np.linalg.eigh(cov)
        n = vecs[:, 0]
        n = n / np.linalg.norm(n)
        if np.dot(n, pts[i] - centroid) < 0:
            n = -n
        normals[i] = n
    return normals


def rotation_from_axis_angle(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation matrix about `axis` by `angle_deg` degrees."""
    a = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(a)
    if norm == 0:
        raise ValueError("axis must be nonzero")
    kx, ky, kz = a / norm
    cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    theta = np.deg2rad(angle_deg)
    return np.eye(3) + np.sin(theta) * cross + (1.0 - np.cos(theta)) * (cross @ cross)


def rotation_angle_deg(rotation: np.ndarray) -> float:
    """Rotation angle of a matrix in degrees, accurate near 0 and near 180.

    Uses atan2 of the skew-part magnitude against (trace - 1) / 2, which avoids
    the arccos precision cliff for very small angles.
    """
    r = np.asarray(rotation, dtype=np.float64)
    skew = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.degrees(np.arctan2(np.linalg.norm(skew), (np.trace(r) - 1.0) / 2.0)))
