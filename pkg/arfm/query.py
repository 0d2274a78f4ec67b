"""
Query proposal: a small network scoring candidate positions of the first
frame by how much the point there is expected to move, and a sampler
turning those scores into query points.
"""
from __future__ import annotations

import logging
import typing
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import softmax
from torch import nn

from arfm.layers import Linear
from arfm.optim import OptimizerState
from arfm.optim import adamw_step
from arfm.pyramid import FeaturePyramid
from arfm.tracks import mean_squared_movement
from arfm.tracks import weighted_sample

if typing.TYPE_CHECKING:
    from arfm.world import Episode

logger = logging.getLogger(__name__)


@dataclass
class QueryConfig:
    hidden: int = 64
    candidates: int = 1000
    temperature: float = 5.0
    points_per_episode: int = 64
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3


class QueryPredictorModel(nn.Module):
    def __init__(self, in_features: int, hidden: int = 64) -> None:
        super().__init__()
        self.mlp = nn.Sequential(Linear(in_features, hidden), nn.GELU(), Linear(hidden, hidden), nn.GELU())
        self.head = Linear(hidden, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """ :return: non-negative movement score per row of `features` """
        return F.softplus(self.head(self.mlp(features))).squeeze(-1)


def query_loss(model: QueryPredictorModel, features: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return torch.mean((model(features) - targets) ** 2)


def query_examples(episode: Episode, pyramid: FeaturePyramid, count: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """
    Local features of randomly chosen points at the pyramid frame and the
    mean squared movement of those points over the rest of the episode.
    """
    ids = rng.choice(episode.num_points, size=min(count, episode.num_points), replace=False)
    features, _ = pyramid.local_features_at(episode.positions[ids, pyramid.frame])
    targets = mean_squared_movement(episode.positions[ids, pyramid.frame:])
    return features.astype(np.float32), targets.astype(np.float32)


def query_train_step(model: QueryPredictorModel, optimizer: OptimizerState, features: np.ndarray,
                     targets: np.ndarray) -> float:
    model.train()
    loss = query_loss(model, torch.from_numpy(features), torch.from_numpy(targets))
    loss.backward()
    adamw_step(optimizer)
    return loss.item()


def query_predict(model: QueryPredictorModel, pyramid: FeaturePyramid, candidates: np.ndarray) -> np.ndarray:
    """
    :param candidates: positions of shape (K, 2)
    :return: predicted movement score per candidate
    """
    features, _ = pyramid.local_features_at(candidates)
    model.eval()
    with torch.no_grad():
        return model(torch.from_numpy(features.astype(np.float32))).numpy()


def sample_queries(scores: np.ndarray, count: int, temperature: float, seed: int) -> np.ndarray:
    """ Indices of `count` distinct candidates drawn with probabilities softmax(scores / temperature). """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return weighted_sample(softmax(np.asarray(scores, dtype=np.float64) / temperature), count,
                           np.random.default_rng(seed))


def propose_queries(model: QueryPredictorModel, pyramid: FeaturePyramid, count: int, temperature: float = 5.0,
                    seed: int = 0, num_candidates: int = 1000, canvas: int = 256) -> np.ndarray:
    """
    Score uniformly drawn candidate positions and sample query points among them.
    :return: query positions of shape (count, 2)
    """
    rng = np.random.default_rng(seed)
    candidates = rng.uniform(0.0, canvas, size=(num_candidates, 2))
    scores = query_predict(model, pyramid, candidates)
    return candidates[sample_queries(scores, count, temperature, seed)]
