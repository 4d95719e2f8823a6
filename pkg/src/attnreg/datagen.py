"""Synthetic registration-pair generation: random poses, independent
sampling, additive clipped noise, plane cropping, ground-truth
correspondence search, category splits, and dataset directory I/O.

Every example is generated from its own counter-based RNG (Philox keyed by
the example seed) so parallel generation is order-independent and
reproducible bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, SizeError
from .geometry import (
    PointCloud,
    RigidTransform,
    apply_transform,
    estimate_normals,
    rotation_from_axis_angle,
)
from .plyio import read_ply, write_ply

REGIMES = ("clean", "noise", "crop")


@dataclass(frozen=True)
class PairConfig:
    points_per_cloud: int = 1024
    rotation_max_deg: float = 80.0
    translation_range: float = 0.5
    noise_sigma: float = 0.01
    noise_clip: float = 0.05
    crop_fraction: float = 0.7
    correspondence_max_dist: float = 0.05
    regime: str = "clean"
    seed: int = 0
    normal_neighbors: int = 20

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ConfigError("crop_fraction must lie in (0, 1]")
        if self.noise_clip < 0 or self.noise_sigma < 0:
            raise ConfigError("noise parameters must be nonnegative")
        if not 0.0 <= self.rotation_max_deg <= 180.0:
            raise ConfigError("rotation_max_deg must lie in [0, 180]")
        if self.points_per_cloud < 1:
            raise ConfigError("points_per_cloud must be positive")
        if self.correspondence_max_dist <= 0:
            raise ConfigError("correspondence_max_dist must be positive")


@dataclass
class GroundTruthMatrix:
    """Binary (M+1)x(N+1) assignment; the last row/column are slack."""

    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)

    @classmethod
    def from_matches(cls, m: int, n: int, pairs) -> "GroundTruthMatrix":
        entries = np.zeros((m + 1, n + 1))
        matched_src = set()
        matched_ref = set()
        for i, j in pairs:
            if i in matched_src or j in matched_ref:
                raise ValueError(f"duplicate match for point pair ({i}, {j})")
            entries[i, j] = 1.0
            matched_src.add(i)
            matched_ref.add(j)
        for i in range(m):
            if i not in matched_src:
                entries[i, n] = 1.0
        for j in range(n):
            if j not in matched_ref:
                entries[m, j] = 1.0
        return cls(entries)

    def match_pairs(self) -> list[tuple[int, int]]:
        block = self.entries[:-1, :-1]
        rows, cols = np.nonzero(block)
        return [(int(i), int(j)) for i, j in zip(rows, cols)]

    def validate(self) -> None:
        m, n = self.entries.shape[0] - 1, self.entries.shape[1] - 1
        if not np.all((self.entries == 0) | (self.entries == 1)):
            raise ValueError("ground truth entries must be binary")
        if self.entries[m, n] != 0:
            raise ValueError("slack corner must be zero")
        row_sums = self.entries[:m].sum(axis=1)
        col_sums = self.entries[:, :n].sum(axis=0)
        if not np.all(row_sums == 1) or not np.all(col_sums == 1):
            raise ValueError("each regular row/column must sum to exactly 1")


@dataclass
class RegistrationExample:
    source: PointCloud
    reference: PointCloud
    gt_transform: RigidTransform
    gt_matrix: GroundTruthMatrix
    label: str = ""
    seed: int | None = None


@dataclass
class ModelEntry:
    """A labelled model cloud with its official train/test designation."""

    cloud: PointCloud
    label: str
    subset: str = "train"


def example_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def random_transform(rotation_max_deg: float, translation_range: float,
                     rng: np.random.Generator) -> RigidTransform:
    """Uniform random axis, angle uniform in [0, max], per-component uniform
    translation in [-range, range]."""
    if rotation_max_deg < 0 or translation_range < 0:
        raise ConfigError("ranges must be nonnegative")
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, rotation_max_deg)
    translation = rng.uniform(-translation_range, translation_range, size=3)
    return RigidTransform(rotation_from_axis_angle(axis, angle), translation)


def crop_plane(cloud: PointCloud, fraction: float, rng: np.random.Generator) -> PointCloud:
    """Keep the floor(fraction * M) points furthest along a random plane
    normal through the centroid, preserving point order."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("crop fraction must lie in (0, 1]")
    m = len(cloud)
    keep_count = int(np.floor(fraction * m))
    if keep_count < 1:
        raise SizeError(f"crop of {m} points at fraction {fraction} keeps nothing")
    normal = rng.normal(size=3)
    while np.linalg.norm(normal) < 1e-12:
        normal = rng.normal(size=3)
    normal = normal / np.linalg.norm(normal)
    signed = (cloud.positions - cloud.positions.mean(axis=0)) @ normal
    order = np.argsort(-signed, kind="stable")
    keep = np.sort(order[:keep_count])
    return cloud.subset(keep)


def add_noise(cloud: PointCloud, sigma: float, clip: float,
              rng: np.random.Generator, normal_neighbors: int = 20) -> PointCloud:
    """Perturb each coordinate by clipped Gaussian noise, then re-estimate
    normals from the perturbed positions."""
    if sigma < 0 or clip < 0:
        raise ConfigError("sigma and clip must be nonnegative")
    offsets = rng.normal(0.0, sigma, size=cloud.positions.shape) if sigma > 0 else \
        np.zeros_like(cloud.positions)
    offsets = np.clip(offsets, -clip, clip)
    positions = cloud.positions + offsets
    k = min(normal_neighbors, len(cloud) - 1)
    normals = estimate_normals(positions, k) if k >= 3 else cloud.normals.copy()
    return PointCloud(positions, normals)


def establish_correspondences(source: PointCloud, reference: PointCloud,
                              gt: RigidTransform, max_dist: float) -> GroundTruthMatrix:
    """Ground-truth matches between the gt-aligned source and the reference.

    Pass 1 takes mutual nearest neighbors within max_dist; pass 2 greedily
    adds remaining pairs in ascending distance order (ties by index) until no
    pair within max_dist is left. Unmatched points map to slack.
    """
    if max_dist <= 0:
        raise ConfigError("max_dist must be positive")
    aligned = gt.apply(source.positions)
    ref = reference.positions
    m, n = len(aligned), len(ref)
    diff = aligned[:, None, :] - ref[None, :, :]
    dists = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    nn_of_src = np.argmin(dists, axis=1)
    nn_of_ref = np.argmin(dists, axis=0)
    pairs = []
    matched_src = np.zeros(m, dtype=bool)
    matched_ref = np.zeros(n, dtype=bool)
    for i in range(m):
        j = nn_of_src[i]
        if nn_of_ref[j] == i and dists[i, j] <= max_dist:
            pairs.append((i, int(j)))
            matched_src[i] = True
            matched_ref[j] = True
    candidates = np.argwhere(dists <= max_dist)
    order = np.lexsort((candidates[:, 1], candidates[:, 0],
                        dists[candidates[:, 0], candidates[:, 1]]))
    for i, j in candidates[order]:
        if not matched_src[i] and not matched_ref[j]:
            pairs.append((int(i), int(j)))
            matched_src[i] = True
            matched_ref[j] = True
    return GroundTruthMatrix.from_matches(m, n, pairs)


def make_pair(model: PointCloud, config: PairConfig, label: str = "") -> RegistrationExample:
    """One registration example per the configured regime.

    clean: a single random subset serves as both clouds (exact, identity
    correspondences). noise: two independently sampled subsets with
    independent clipped noise, correspondences re-established. crop: as
    noise, plus an independent plane crop of each cloud before the
    correspondence search. The reference cloud is the transformed one.
    """
    total = len(model)
    p = config.points_per_cloud
    if total < p:
        raise SizeError(f"model has {total} points, need at least {p}")
    rng = example_rng(config.seed)
    gt = random_transform(config.rotation_max_deg, config.translation_range, rng)
    if config.regime == "clean":
        idx = rng.choice(total, size=p, replace=False)
        base = model.subset(idx)
        source = base
        reference = apply_transform(gt, base)
        gt_matrix = GroundTruthMatrix.from_matches(p, p, [(i, i) for i in range(p)])
    else:
        idx_s = rng.choice(total, size=p, replace=False)
        idx_r = rng.choice(total, size=p, replace=False)
        source = add_noise(model.subset(idx_s), config.noise_sigma, config.noise_clip,
                           rng, config.normal_neighbors)
        ref_base = add_noise(model.subset(idx_r), config.noise_sigma, config.noise_clip,
                             rng, config.normal_neighbors)
        if config.regime == "crop":
            source = crop_plane(source, config.crop_fraction, rng)
            ref_base = crop_plane(ref_base, config.crop_fraction, rng)
        reference = apply_transform(gt, ref_base)
        gt_matrix = establish_correspondences(source, reference, gt,
                                              config.correspondence_max_dist)
    return RegistrationExample(source, reference, gt, gt_matrix, label, config.seed)


def split_categories(entries, mode: str):
    """(train, val, test) model lists.

    official: the train-designated items split 80:20 into train/val by list
    order, test-designated items held out. unseen: train on the first half of
    the sorted categories (train items), validate on same-category test
    items, test on the remaining categories' test items.
    """
    entries = list(entries)
    if mode == "official":
        train_items = [e for e in entries if e.subset == "train"]
        test_items = [e for e in entries if e.subset == "test"]
        cut = int(np.floor(0.8 * len(train_items)))
        return train_items[:cut], train_items[cut:], test_items
    if mode == "unseen":
        categories = sorted({e.label for e in entries})
        if len(categories) < 2:
            raise ConfigError("unseen split needs at least 2 categories")
        first_half = set(categories[: len(categories) // 2])
        train = [e for e in entries if e.label in first_half and e.subset == "train"]
        val = [e for e in entries if e.label in first_half and e.subset == "test"]
        test = [e for e in entries if e.label not in first_half and e.subset == "test"]
        return train, val, test
    raise ConfigError(f"unknown split mode {mode!r}")


# ---------------------------------------------------------------------------
# toy model shapes (random smooth bumpy spheres) for desk-scale runs
# ---------------------------------------------------------------------------


def toy_shape(seed: int, n_points: int = 128, bumps: int = 4) -> PointCloud:
    """A seeded asymmetric blob: unit-sphere samples with radial Gaussian
    bumps, rescaled into the unit sphere."""
    rng = example_rng(seed)
    directions = rng.normal(size=(n_points, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = rng.normal(size=(bumps, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    widths = rng.uniform(0.25, 0.7, size=bumps)
    amplitudes = rng.uniform(-0.35, 0.5, size=bumps)
    radii = np.ones(n_points)
    for center, width, amp in zip(centers, widths, amplitudes):
        d2 = np.einsum("ij,ij->i", directions - center, directions - center)
        radii = radii + amp * np.exp(-d2 / (2.0 * width * width))
    positions = directions * radii[:, None]
    positions /= np.max(np.linalg.norm(positions, axis=1))
    normals = estimate_normals(positions, min(8, n_points - 1))
    return PointCloud(positions, normals)


def toy_models(count: int, n_points: int = 128, base_seed: int = 0,
               subset: str = "train") -> list[ModelEntry]:
    return [
        ModelEntry(toy_shape(base_seed + i, n_points), f"shape{i:02d}", subset)
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# dataset directory format: paired PLY files + JSON sidecar per example,
# manifest.json listing everything with the effective config
# ---------------------------------------------------------------------------


def example_basename(index: int) -> str:
    return f"pair_{index:05d}"


def write_example(directory, name: str, example: RegistrationExample) -> None:
    directory = Path(directory)
    write_ply(directory / f"{name}_source.ply", example.source)
    write_ply(directory / f"{name}_reference.ply", example.reference)
    sidecar = {
        "rotation": [float(v) for v in example.gt_transform.rotation.reshape(-1)],
        "translation": [float(v) for v in example.gt_transform.translation],
        "matches": [[int(i), int(j)] for i, j in example.gt_matrix.match_pairs()],
        "label": example.label,
        "seed": example.seed,
    }
    with open(directory / f"{name}.json", "w", encoding="utf-8") as handle:
        json.dump(sidecar, handle, sort_keys=True, indent=1)
        handle.write("\n")


def read_example(directory, name: str) -> RegistrationExample:
    directory = Path(directory)
    source = read_ply(directory / f"{name}_source.ply")
    reference = read_ply(directory / f"{name}_reference.ply")
    with open(directory / f"{name}.json", "r", encoding="utf-8") as handle:
        sidecar = json.load(handle)
    rotation = np.asarray(sidecar["rotation"], dtype=np.float64).reshape(3, 3)
    translation = np.asarray(sidecar["translation"], dtype=np.float64)
    gt = RigidTransform(rotation, translation)
    matrix = GroundTruthMatrix.from_matches(
        len(source), len(reference), [tuple(p) for p in sidecar["matches"]])
    return RegistrationExample(source, reference, gt, matrix,
                               sidecar.get("label", ""), sidecar.get("seed"))


def write_manifest(directory, names: list[str], config: PairConfig,
                   tool_version: str, extra: dict | None = None) -> None:
    manifest = {
        "format": "attnreg-dataset-v1",
        "tool_version": tool_version,
        "config": asdict(config),
        "examples": names,
    }
    if extra:
        manifest.update(extra)
    with open(Path(directory) / "manifest.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, sort_keys=True, indent=1)
        handle.write("\n")


def read_dataset(directory) -> tuple[list[RegistrationExample], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"{directory}: missing manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    examples = [read_example(directory, name) for name in manifest["examples"]]
    return examples, manifest
