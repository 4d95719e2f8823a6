"""Correspondence prediction: similarity scores, slack-augmented Sinkhorn
normalization, hard-match extraction and validity checks.

The score matrix is treated as the log-affinity of an optimal transport
problem; a slack row and column (one shared learnable score) absorb
unmatched points. Log-domain Sinkhorn alternates row and column
normalization against marginals [1..1, N] / [1..1, M], staying
differentiable through every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError, ShapeError, SizeError


@dataclass
class CorrespondenceSet:
    """Hard one-to-one matches: (source index, reference index, score)."""

    pairs: list = field(default_factory=list)
    valid: bool | None = None

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def source_indices(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    @property
    def reference_indices(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.int64)

    @property
    def scores(self) -> np.ndarray:
        return np.array([p[2] for p in self.pairs], dtype=np.float64)


def similarity(f_s, f_r) -> Tensor:
    """Dot-product similarity between every source/reference feature pair."""
    f_s, f_r = ad.as_tensor(f_s), ad.as_tensor(f_r)
    if f_s.data.ndim != 2 or f_r.data.ndim != 2 or f_s.shape[1] != f_r.shape[1]:
        raise ShapeError(
            f"feature matrices must share their last dim, got {f_s.shape} and {f_r.shape}"
        )
    return ad.matmul(f_s, ad.transpose(f_r))


def sinkhorn_slack(scores, slack_score, iterations: int = 10) -> Tensor:
    """Slack-augmented log-domain Sinkhorn normalization of a score matrix.

    Each of the M regular rows is normalized over all N+1 entries (slack
    column included) and each of the N regular columns over all M+1 entries,
    so unmatched mass drains into the slack row/column. The slack row and
    column are not normalized themselves, which converges within a few
    iterations even when most points are unmatched; the corner keeps its
    initial value. Differentiable through every iteration.
    """
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    scores = ad.as_tensor(scores)
    if scores.data.ndim != 2:
        raise ShapeError(f"score matrix must be 2-D, got {scores.shape}")
    if not np.all(np.isfinite(scores.data)):
        raise NumericError("score matrix contains non-finite values")
    slack = ad.as_tensor(slack_score, dtype=scores.dtype)
    if not np.all(np.isfinite(slack.data)):
        raise NumericError("slack score is non-finite")
    m, n = scores.shape
    slack_cell = ad.reshape(slack, (1, 1))
    top = ad.concat([scores, ad.expand(slack_cell, (m, 1))], axis=1)
    bottom = ad.expand(slack_cell, (1, n + 1))
    z = ad.concat([top, bottom], axis=0)
    for _ in range(iterations):
        regular_rows = ad.narrow(z, 0, 0, m)
        regular_rows = ad.sub(regular_rows, ad.logsumexp(regular_rows, axis=1))
        z = ad.concat([regular_rows, ad.narrow(z, 0, m, 1)], axis=0)
        regular_cols = ad.narrow(z, 1, 0, n)
        regular_cols = ad.sub(regular_cols, ad.logsumexp(regular_cols, axis=0))
        z = ad.concat([regular_cols, ad.narrow(z, 1, n, 1)], axis=1)
    return ad.exp(z)


def extract_matches(assignment, match_threshold: float = 0.5) -> CorrespondenceSet:
    """Mutual strict row/column maxima of the non-slack block above threshold.

    Entries exactly equal to the threshold or tied with another maximum are
    excluded; the slack row/column never matches.
    """
    values = assignment.data if isinstance(assignment, Tensor) else np.asarray(assignment)
    if values.ndim != 2 or values.shape[0] < 2 or values.shape[1] < 2:
        raise ShapeError(f"assignment must be at least 2x2 (slack included), got {values.shape}")
    block = values[:-1, :-1]
    row_max = block.max(axis=1)
    col_max = block.max(axis=0)
    pairs = []
    for i in range(block.shape[0]):
        j = int(np.argmax(block[i]))
        v = block[i, j]
        if not v > match_threshold:
            continue
        if np.count_nonzero(block[i] == row_max[i]) != 1:
            continue  # tied row maximum
        if v != col_max[j] or np.count_nonzero(block[:, j] == col_max[j]) != 1:
            continue  # not the unique column maximum
        pairs.append((i, j, float(v)))
    return CorrespondenceSet(pairs)


def is_valid(correspondences: CorrespondenceSet, min_matches: int = 3) -> bool:
    """A registration attempt counts as valid with at least min_matches pairs."""
    if min_matches < 1:
        raise ConfigError("min_matches must be positive")
    return len(correspondences) >= min_matches
