"""Per-point feature extraction: edge-conv encoder + location encoder + fusion.

The edge-conv branch embeds each point's k-NN patch through shared MLP layers
with max-pooling and batch norm, concatenating all layer outputs before a
bottleneck MLP. The location branch is a pure point-wise MLP on position and
normal. The two are fused by a small MLP (or one of the ablation variants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, ShapeError
from .geometry import NeighborGraph, PointCloud
from .layers import BatchNorm, Linear, MLP

FUSION_MODES = ("mlp", "additive", "location_only", "feature_only")

# unit-sphere inputs shifted by up to the generator's translation range
_SOFT_POSITION_BOUND = 2.0


@dataclass(frozen=True)
class HeadConfig:
    d: int = 128
    k: int = 20
    encoder_widths: tuple = (64, 64, 128, 256)
    bottleneck_widths: tuple = (256, 128)
    locenc_widths: tuple = (16, 32, 64, 128)
    fusion: str = "mlp"

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.locenc_widths[-1] != self.d:
            raise ConfigError(
                f"location encoder must end at d={self.d}, got {self.locenc_widths}"
            )
        if self.fusion in ("additive", "feature_only") and self.bottleneck_widths[-1] != self.d:
            raise ConfigError(
                f"fusion {self.fusion!r} needs bottleneck output {self.d}, "
                f"got {self.bottleneck_widths}"
            )
        if self.k < 1:
            raise ConfigError("neighborhood size k must be positive")


def cloud_input(cloud: PointCloud, dtype) -> Tensor:
    """Network input rows: position and normal concatenated (M, 6)."""
    return ad.constant(
        np.concatenate([cloud.positions, cloud.normals], axis=1), dtype=dtype
    )


class FeatureHead:
    """Siamese per-point descriptor network; one instance serves both clouds."""

    def __init__(self, store: ParamStore, config: HeadConfig,
                 rng: np.random.Generator, name: str = "head"):
        self.config = config
        self.dtype = store.dtype
        self.edge_layers = []
        prev = 6
        for i, width in enumerate(config.encoder_widths):
            linear = Linear(store, f"{name}.edge{i}", 2 * prev, width, rng)
            norm = BatchNorm(store, f"{name}.edge{i}.norm", width)
            self.edge_layers.append((linear, norm))
            prev = width
        concat_dim = sum(config.encoder_widths)
        self.bottleneck = MLP(store, f"{name}.bottleneck", concat_dim,
                              config.bottleneck_widths, rng)
        self.locenc = MLP(store, f"{name}.locenc", 6, config.locenc_widths, rng)
        if config.fusion == "mlp":
            fuse_in = config.bottleneck_widths[-1] + config.d
            self.fuse_mlp = MLP(store, f"{name}.fuse", fuse_in,
                                (config.d, config.d), rng)
        else:
            self.fuse_mlp = None

    def _edge_stack(self, clouds_graphs, mode: str):
        """Run the edge-conv layers over one or more clouds.

        Batch-norm statistics pool over all given clouds (the siamese pair in
        the registration path), so train-mode statistics match what the
        running buffers see at inference.
        """
        states = []
        for cloud, graph in clouds_graphs:
            m = len(cloud)
            if graph.indices.shape[0] != m:
                raise ShapeError(
                    f"graph covers {graph.indices.shape[0]} points, cloud has {m}"
                )
            states.append(cloud_input(cloud, self.dtype))
        sizes = [s.shape[0] for s in states]
        per_cloud_outputs = [[] for _ in states]
        for linear, norm in self.edge_layers:
            pooled = []
            for state, (cloud, graph) in zip(states, clouds_graphs):
                m, c = state.shape
                k = graph.k
                neighbors = ad.gather(state, graph.indices)            # (M, k, C)
                center = ad.expand(ad.reshape(state, (m, 1, c)), (m, k, c))
                edge = ad.concat([center, ad.sub(neighbors, center)], axis=2)
                z = ad.leaky_relu(linear(edge))
                pooled.append(ad.max_pool(z, axis=1))
            joint = norm(ad.concat(pooled, axis=0) if len(pooled) > 1 else pooled[0],
                         mode)
            states = _split_rows(joint, sizes)
            for outputs, state in zip(per_cloud_outputs, states):
                outputs.append(state)
        stacked = [ad.concat(outputs, axis=1) for outputs in per_cloud_outputs]
        bottlenecked = self.bottleneck(
            ad.concat(stacked, axis=0) if len(stacked) > 1 else stacked[0])
        return _split_rows(bottlenecked, sizes)

    def edgeconv_encode(self, cloud: PointCloud, graph: NeighborGraph,
                        mode: str = "eval") -> Tensor:
        """Local-geometry descriptors via stacked edge-conv layers."""
        return self._edge_stack([(cloud, graph)], mode)[0]

    def location_encode(self, cloud: PointCloud) -> Tensor:
        """Point-wise positional descriptors, independent of neighbors."""
        assert np.max(np.linalg.norm(cloud.positions, axis=1)) <= _SOFT_POSITION_BOUND, \
            "positions far outside the normalized input range"
        return self.locenc(cloud_input(cloud, self.dtype))

    def fuse(self, local: Tensor, loc: Tensor, mode_name: str | None = None) -> Tensor:
        """Combine the two branches according to the fusion mode."""
        fusion = mode_name or self.config.fusion
        if fusion == "mlp":
            return self.fuse_mlp(ad.concat([local, loc], axis=1))
        if fusion == "additive":
            if local.shape != loc.shape:
                raise ShapeError(
                    f"additive fusion needs equal dims, got {local.shape} and {loc.shape}"
                )
            return ad.add(local, loc)
        if fusion == "location_only":
            return loc
        if fusion == "feature_only":
            return local
        raise ConfigError(f"unknown fusion mode {fusion!r}")

    def _finish(self, local: Tensor | None, cloud: PointCloud) -> Tensor:
        fusion = self.config.fusion
        if fusion == "location_only":
            return self.location_encode(cloud)
        if fusion == "feature_only":
            return local
        return self.fuse(local, self.location_encode(cloud))

    def __call__(self, cloud: PointCloud, graph: NeighborGraph,
                 mode: str = "eval") -> Tensor:
        fusion = self.config.fusion
        local = None if fusion == "location_only" else \
            self.edgeconv_encode(cloud, graph, mode)
        return self._finish(local, cloud)

    def pair(self, cloud_s: PointCloud, graph_s: NeighborGraph,
             cloud_r: PointCloud, graph_r: NeighborGraph,
             mode: str = "eval") -> tuple[Tensor, Tensor]:
        """Siamese forward over both clouds with pair-pooled batch statistics."""
        if self.config.fusion == "location_only":
            local_s = local_r = None
        else:
            local_s, local_r = self._edge_stack(
                [(cloud_s, graph_s), (cloud_r, graph_r)], mode)
        return self._finish(local_s, cloud_s), self._finish(local_r, cloud_r)


def _split_rows(joint: Tensor, sizes) -> list[Tensor]:
    if len(sizes) == 1:
        return [joint]
    parts = []
    offset = 0
    for size in sizes:
        parts.append(ad.narrow(joint, 0, offset, size))
        offset += size
    return parts
