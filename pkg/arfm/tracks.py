"""
Track sets and the training-data side of them: visibility filtering,
movement-weighted subsampling and the input/target/condition transforms.
"""
from __future__ import annotations

import logging
import typing
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

logger = logging.getLogger(__name__)

TEMPERATURE_RANGE = (0.5, 50.0)


class EmptySelection(ValueError):
    pass


class TrackSet(object):
    def __init__(self, points: np.ndarray, visibility: typing.Optional[np.ndarray] = None,
                 frame_rate: float = 25.0, point_ids: typing.Optional[np.ndarray] = None) -> None:
        """
        N point tracks over L frames.
        :param points: pixel positions of shape (N, L, 2)
        :param visibility: booleans of shape (N, L); all visible when omitted
        :param point_ids: identifiers of the tracks in their source, defaults to 0..N-1
        """
        points = np.asarray(points)
        if points.ndim != 3 or points.shape[-1] != 2:
            raise ValueError(f"points must have shape (N, L, 2), got {points.shape}")
        if points.shape[0] < 1 or points.shape[1] < 2:
            raise ValueError(f"a track set needs at least one track and two frames, got {points.shape}")
        if not np.isfinite(points).all():
            raise ValueError("track positions must be finite")
        if visibility is None:
            visibility = np.ones(points.shape[:2], dtype=bool)
        visibility = np.asarray(visibility, dtype=bool)
        if visibility.shape != points.shape[:2]:
            raise ValueError(f"visibility {visibility.shape} does not match points {points.shape}")
        self.points = points
        self.visibility = visibility
        self.frame_rate = float(frame_rate)
        self.point_ids = np.arange(points.shape[0]) if point_ids is None else np.asarray(point_ids)

    def __repr__(self) -> str:
        return f"<{type(self).__name__} (tracks: {self.num_tracks}, frames: {self.length})>"

    def __len__(self) -> int:
        return self.num_tracks

    @property
    def num_tracks(self) -> int:
        return self.points.shape[0]

    @property
    def length(self) -> int:
        return self.points.shape[1]

    def subset(self, indices: np.ndarray) -> TrackSet:
        indices = np.asarray(indices)
        return TrackSet(self.points[indices], self.visibility[indices], self.frame_rate, self.point_ids[indices])

    def window(self, start: int, length: int) -> TrackSet:
        if start < 0 or start + length > self.length:
            raise ValueError(f"window [{start}, {start + length}) outside of {self.length} frames")
        return TrackSet(self.points[:, start:start + length], self.visibility[:, start:start + length],
                        self.frame_rate, self.point_ids)

    def shifts(self) -> np.ndarray:
        return self.points[:, 1:] - self.points[:, :-1]


@dataclass
class SamplingSpec:
    temperature: float
    count: int
    min_visibility: float = 0.5

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.count < 1:
            raise ValueError(f"count must be positive, got {self.count}")


@dataclass
class TrainTensors:
    inputs: np.ndarray
    targets: np.ndarray
    cond_shifts: np.ndarray


def filter_visibility(tracks: TrackSet, conditioning_frames: int, min_ratio: float = 0.5) -> np.ndarray:
    """
    Indices of tracks visible on strictly more than `min_ratio` of the frames after the conditioning prefix.
    :raises EmptySelection: when no track survives
    """
    if not 0 <= conditioning_frames < tracks.length:
        raise ValueError(f"conditioning_frames must be in [0, {tracks.length}), got {conditioning_frames}")
    future = tracks.visibility[:, conditioning_frames:]
    keep = future.sum(axis=1) > min_ratio * future.shape[1]
    indices = np.flatnonzero(keep)
    if indices.size == 0:
        raise EmptySelection(f"no track is visible on more than {min_ratio:.0%} of the future frames")
    return indices


def mean_squared_movement(points: np.ndarray) -> np.ndarray:
    """ Mean squared per-frame displacement of tracks of shape (N, L, 2). """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[1] < 2:
        return np.zeros(points.shape[0])
    displacement = np.diff(points, axis=1)
    return (displacement ** 2).sum(axis=-1).mean(axis=1)


def movement_weights(tracks: TrackSet, temperature: float) -> np.ndarray:
    """ softmax(m / temperature) over the mean squared movement m of every track. """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return softmax(mean_squared_movement(tracks.points) / temperature)


def weighted_sample(probabilities: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """ Draw `count` distinct indices with the given probabilities. """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if count > probabilities.shape[0]:
        raise ValueError(f"cannot draw {count} distinct items from {probabilities.shape[0]}")
    if (probabilities < 0).any() or not probabilities.sum() > 0:
        raise ValueError("probabilities must be non-negative and not all zero")
    probabilities = probabilities / probabilities.sum()
    return rng.choice(probabilities.shape[0], size=count, replace=False, p=probabilities)


def subsample_tracks(tracks: TrackSet, spec: SamplingSpec, seed: int,
                     weights: typing.Optional[np.ndarray] = None) -> TrackSet:
    """
    Draw `spec.count` distinct tracks, favouring fast-moving ones.
    :param weights: explicit selection probabilities instead of movement weights
    """
    if spec.count > tracks.num_tracks:
        raise ValueError(f"cannot draw {spec.count} tracks from {tracks.num_tracks}")
    probabilities = movement_weights(tracks, spec.temperature) if weights is None else weights
    indices = weighted_sample(probabilities, spec.count, np.random.default_rng(seed))
    return tracks.subset(indices)


def draw_temperature(rng: np.random.Generator, low: float = TEMPERATURE_RANGE[0],
                     high: float = TEMPERATURE_RANGE[1]) -> float:
    """ Log-uniform draw from [low, high]. """
    return float(np.exp(rng.uniform(np.log(low), np.log(high))))


def make_train_tensors(tracks: TrackSet) -> TrainTensors:
    """
    Inputs are frames 0..L-2, targets the shifts into frames 1..L-1 and the
    condition of each step the previous shift (zero at the first step).
    """
    points = tracks.points
    targets = points[:, 1:] - points[:, :-1]
    cond_shifts = np.zeros_like(targets)
    cond_shifts[:, 1:] = targets[:, :-1]
    return TrainTensors(inputs=points[:, :-1], targets=targets, cond_shifts=cond_shifts)
