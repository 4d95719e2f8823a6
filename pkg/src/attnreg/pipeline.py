"""End-to-end registration: the full matching network, iterative refinement,
pose recovery from hard correspondences, and a point-to-point ICP baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, FeatureAugmenter
from .autodiff import ParamStore, Tensor
from .errors import ConfigError
from .feature_head import FeatureHead, HeadConfig
from .geometry import (
    PointCloud,
    RigidTransform,
    apply_transform,
    compose,
    kabsch,
    knn,
)
from .matcher import CorrespondenceSet, extract_matches, is_valid, similarity, sinkhorn_slack


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and matching hyperparameters of the registration network."""

    d: int = 128
    k: int = 20
    stacks: int = 9
    heads: int = 2
    encoder_widths: tuple = (64, 64, 128, 256)
    bottleneck_widths: tuple = (256, 128)
    locenc_widths: tuple = (16, 32, 64, 128)
    fusion: str = "mlp"
    sinkhorn_iterations: int = 10
    match_threshold: float = 0.5
    min_matches: int = 3

    def __post_init__(self):
        if self.sinkhorn_iterations < 1:
            raise ConfigError("sinkhorn_iterations must be >= 1")
        if not 0.0 <= self.match_threshold <= 1.0:
            raise ConfigError("match_threshold must lie in [0, 1]")
        if self.min_matches < 1:
            raise ConfigError("min_matches must be positive")
        self.head_config()  # validates width consistency
        self.attention_config()

    @classmethod
    def for_dim(cls, d: int, **overrides) -> "ModelConfig":
        """Scale the default layer widths to a feature dimension d."""
        widths = {
            "encoder_widths": (max(d // 2, 4), max(d // 2, 4), d, 2 * d),
            "bottleneck_widths": (2 * d, d),
            "locenc_widths": (max(d // 8, 4), max(d // 4, 4), max(d // 2, 4), d),
        }
        widths.update(overrides)
        return cls(d=d, **widths)

    def head_config(self) -> HeadConfig:
        return HeadConfig(d=self.d, k=self.k, encoder_widths=tuple(self.encoder_widths),
                          bottleneck_widths=tuple(self.bottleneck_widths),
                          locenc_widths=tuple(self.locenc_widths), fusion=self.fusion)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(stacks=self.stacks, heads=self.heads, d=self.d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        fields = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
        return cls(**fields)


class RegistrationModel:
    """Feature head + attention augmentation + Sinkhorn matcher with one
    shared parameter store (fully siamese)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.store = ParamStore(dtype=dtype)
        rng = np.random.default_rng(seed)
        self.head = FeatureHead(self.store, config.head_config(), rng)
        self.augmenter = FeatureAugmenter(self.store, config.attention_config(), rng)
        self.slack_score = self.store.param("slack_score", 0.0)

    def features(self, source: PointCloud, reference: PointCloud,
                 mode: str = "eval") -> tuple[Tensor, Tensor]:
        """Augmented per-point descriptors for both clouds.

        Batch-norm statistics pool over the pair so that training statistics
        match what the running buffers average at inference.
        """
        graph_s = knn(source.positions, self.config.k)
        graph_r = knn(reference.positions, self.config.k)
        f_s, f_r = self.head.pair(source, graph_s, reference, graph_r, mode)
        return self.augmenter(f_s, f_r, mode)

    def assignment(self, source: PointCloud, reference: PointCloud,
                   mode: str = "eval") -> Tensor:
        """Soft (M+1, N+1) assignment between source and reference points."""
        f_s, f_r = self.features(source, reference, mode)
        return sinkhorn_slack(similarity(f_s, f_r), self.slack_score,
                              self.config.sinkhorn_iterations)

    def state_dict(self) -> dict:
        return self.store.state_dict()

    def load_state(self, state: dict) -> None:
        self.store.load_state_dict(state)


@dataclass
class RegistrationResult:
    transform: RigidTransform
    correspondences: CorrespondenceSet
    valid: bool
    iterations_used: int
    iteration_transforms: list = field(default_factory=list)
    attempt_history: list | None = None


def register_once(source: PointCloud, reference: PointCloud, model) -> RegistrationResult:
    """One pass of the matching network plus SVD pose recovery.

    Returns the identity transform with valid=False when fewer than
    min_matches confident correspondences survive extraction.
    """
    cfg = model.config
    assignment = model.assignment(source, reference, mode="eval")
    matches = extract_matches(assignment, cfg.match_threshold)
    matches.valid = is_valid(matches, cfg.min_matches)
    if not matches.valid:
        return RegistrationResult(RigidTransform.identity(), matches, False, 1, [])
    transform = kabsch(source.positions[matches.source_indices],
                       reference.positions[matches.reference_indices])
    return RegistrationResult(transform, matches, True, 1, [transform])


def register(source: PointCloud, reference: PointCloud, model,
             iterations: int = 2) -> RegistrationResult:
    """Iterative registration: re-feed the aligned source through the network.

    Stops at the first invalid iteration, keeping the last valid composition;
    the result's valid flag reflects the final attempt.
    """
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    current = RigidTransform.identity()
    step_transforms: list[RigidTransform] = []
    last_matches = CorrespondenceSet([], valid=False)
    for n in range(1, iterations + 1):
        moved = apply_transform(current, source) if step_transforms else source
        step = register_once(moved, reference, model)
        last_matches = step.correspondences
        if not step.valid:
            return RegistrationResult(current, last_matches, False, n,
                                      list(step_transforms))
        step_transforms.append(step.transform)
        current = compose(step.transform, current)
    return RegistrationResult(current, last_matches, True, iterations, step_transforms)


def register_with_resample(source: PointCloud, reference: PointCloud, model,
                           attempts: int, sample_size: int,
                           rng: np.random.Generator,
                           iterations: int = 2) -> RegistrationResult:
    """Retry registration on fresh random subsets until one attempt is valid.

    Match indices in the returned result refer to the original clouds.
    """
    if attempts < 1:
        raise ConfigError("attempts must be >= 1")
    history: list[RegistrationResult] = []
    result = None
    for _ in range(attempts):
        size_s = min(sample_size, len(source))
        size_r = min(sample_size, len(reference))
        idx_s = np.sort(rng.choice(len(source), size_s, replace=False))
        idx_r = np.sort(rng.choice(len(reference), size_r, replace=False))
        sub_result = register(source.subset(idx_s), reference.subset(idx_r),
                              model, iterations)
        remapped = CorrespondenceSet(
            [(int(idx_s[i]), int(idx_r[j]), s) for i, j, s in sub_result.correspondences.pairs],
            valid=sub_result.correspondences.valid,
        )
        result = RegistrationResult(sub_result.transform, remapped, sub_result.valid,
                                    sub_result.iterations_used,
                                    sub_result.iteration_transforms)
        history.append(result)
        if result.valid:
            break
    result.attempt_history = history
    return result


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    max_pair_dist: float = 0.1
    convergence_eps: float = 1e-8

    def __post_init__(self):
        if self.max_iterations < 1 or self.max_pair_dist <= 0 or self.convergence_eps <= 0:
            raise ConfigError("ICP parameters must be positive")


@dataclass
class IcpResult:
    transform: RigidTransform
    converged: bool
    no_progress: bool
    iterations: int
    residual: float


def icp(source: PointCloud, reference: PointCloud,
        init: RigidTransform | None = None,
        config: IcpConfig = IcpConfig()) -> IcpResult:
    """Point-to-point ICP with distance-based pair rejection.

    Stops when the mean squared residual change falls below convergence_eps
    or when too few pairs survive rejection (no_progress).
    """
    estimate = init if init is not None else RigidTransform.identity()
    ref = reference.positions
    prev_mse = None
    mse = np.inf
    for iteration in range(1, config.max_iterations + 1):
        moved = estimate.apply(source.positions)
        nearest_idx = np.empty(len(moved), dtype=np.int64)
        nearest_d2 = np.empty(len(moved))
        for start in range(0, len(moved), 256):
            stop = min(start + 256, len(moved))
            diff = moved[start:stop, None, :] - ref[None, :, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
            nearest_idx[start:stop] = np.argmin(d2, axis=1)
            nearest_d2[start:stop] = np.min(d2, axis=1)
        keep = nearest_d2 <= config.max_pair_dist ** 2
        if np.count_nonzero(keep) < 3:
            return IcpResult(estimate, False, True, iteration, float(mse))
        matched_src = moved[keep]
        matched_ref = ref[nearest_idx[keep]]
        delta = kabsch(matched_src, matched_ref)
        estimate = compose(delta, estimate)
        residuals = delta.apply(matched_src) - matched_ref
        mse = float(np.mean(np.einsum("ij,ij->i", residuals, residuals)))
        if prev_mse is not None and abs(prev_mse - mse) < config.convergence_eps:
            return IcpResult(estimate, True, False, iteration, mse)
        prev_mse = mse
    return IcpResult(estimate, False, False, config.max_iterations, float(mse))
