"""Shared fixtures: tiny models, oracle-feature registration, toy pairs."""

import numpy as np
import pytest

from attnreg.autodiff import Tensor
from attnreg.datagen import PairConfig, make_pair, toy_shape
from attnreg.matcher import similarity, sinkhorn_slack
from attnreg.pipeline import ModelConfig, RegistrationModel


def tiny_model_config(**overrides):
    defaults = dict(k=3, stacks=1, heads=2, sinkhorn_iterations=5)
    defaults.update(overrides)
    return ModelConfig.for_dim(16, **defaults)


@pytest.fixture
def tiny_model():
    return RegistrationModel(tiny_model_config(), seed=0)


class OracleFeatureModel:
    """Bypasses the network: one-hot features encode a planted permutation,
    scaled so matched pairs score far above everything else."""

    def __init__(self, pairs, m, n, scale=5.0, slack=-10.0,
                 match_threshold=0.5, min_matches=3, sinkhorn_iterations=10):
        dim = max(len(pairs), 1)
        f_s = np.zeros((m, dim), dtype=np.float32)
        f_r = np.zeros((n, dim), dtype=np.float32)
        for axis, (i, j) in enumerate(pairs):
            f_s[i, axis] = scale
            f_r[j, axis] = scale
        self._f_s = f_s
        self._f_r = f_r
        self._slack = slack
        self._iterations = sinkhorn_iterations
        self.config = ModelConfig(match_threshold=match_threshold,
                                  min_matches=min_matches)

    def assignment(self, source, reference, mode="eval"):
        scores = similarity(Tensor(self._f_s), Tensor(self._f_r))
        return sinkhorn_slack(scores, self._slack, self._iterations)


def exact_crop_pair(seed, model_points=96, crop_fraction=0.7):
    """A crop-regime pair whose ground-truth matches are exact: both clouds
    are permutations of the same model points (no noise), independently
    cropped, so matched pairs coincide under the ground-truth transform."""
    model = toy_shape(seed=seed + 1000, n_points=model_points)
    cfg = PairConfig(points_per_cloud=model_points, regime="crop",
                     noise_sigma=0.0, crop_fraction=crop_fraction, seed=seed,
                     normal_neighbors=8)
    return make_pair(model, cfg)


def toy_pair(seed, regime="noise", points=64, model_points=128, model_seed=None,
             **config_overrides):
    model = toy_shape(seed=model_seed if model_seed is not None else seed + 500,
                      n_points=model_points)
    cfg = PairConfig(points_per_cloud=points, regime=regime, seed=seed,
                     normal_neighbors=8, **config_overrides)
    return make_pair(model, cfg)
