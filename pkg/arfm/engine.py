"""
Autoregressive inference: full rollouts and the rolling prediction horizon
that is re-planned whenever the online tracker reports a new frame.
"""
from __future__ import annotations

import logging
import typing
from dataclasses import dataclass

import numpy as np
import torch

from arfm.fusion import FeatureFusion
from arfm.layers import AttentionCache
from arfm.layers import CacheError
from arfm.pyramid import FeaturePyramid
from arfm.pyramid import render_pyramid
from arfm.tracks import TrackSet
from arfm.world import Episode
from arfm.world import oracle_tracks
from arfm.world import online_track_next

if typing.TYPE_CHECKING:
    from arfm.model import ArfmModel

logger = logging.getLogger(__name__)


def render_pyramids(model: ArfmModel, episode: Episode, frames: typing.Iterable[int]) -> list[FeaturePyramid]:
    config = model.config.fusion
    return [render_pyramid(episode, frame, config.local_strides, config.local_channels, config.global_stride,
                           config.global_channels) for frame in frames]


def observed_tracks(episode: Episode, queries: np.ndarray, frames: int) -> np.ndarray:
    """
    Ground truth of the first `frames` frames for point ids (1-D integers) or query positions (Q, 2).
    :return: float32 array of shape (N, frames, 2)
    """
    queries = np.asarray(queries)
    if queries.ndim == 1 and np.issubdtype(queries.dtype, np.integer):
        return episode.positions[queries, :frames]
    return oracle_tracks(episode, queries, 0).points[:, :frames]


def _step_tokens(fusion: FeatureFusion, pyramids: list[FeaturePyramid], positions: torch.Tensor, step: int,
                 observed_frames: int, frame_rate: torch.Tensor) -> torch.Tensor:
    """ Tokens of one prediction step for positions (B, N, 2). """
    pyramid = pyramids[min(step, observed_frames - 1)]
    batch, num_points = positions.shape[:2]
    local, _ = pyramid.local_features_at(positions.reshape(-1, 2).numpy())
    local = torch.from_numpy(local).reshape(batch, 1, num_points, -1)
    cells = torch.from_numpy(pyramid.global_tokens)
    global_feats = cells[None, None].expand(batch, 1, -1, -1)
    visible = torch.full((batch, 1), step < observed_frames, dtype=torch.bool)
    return fusion.step_tokens(local, global_feats, visible, frame_rate, first_slot=step + 1)


def _start_cache(model: ArfmModel, condition: torch.Tensor, frame_rate: torch.Tensor,
                 num_points: int) -> AttentionCache:
    fusion = model.fusion
    cache = fusion.new_cache()
    tokens = fusion.condition_tokens(condition, frame_rate, num_points + fusion.config.num_global_tokens)
    fusion.step(cache, tokens, num_points, step_index=0)
    cache.commit()
    return cache


def _advance(model: ArfmModel, cache: AttentionCache, pyramids: list[FeaturePyramid], positions: torch.Tensor,
             step: int, observed_frames: int, frame_rate: torch.Tensor) -> torch.Tensor:
    """ Run and commit one step; returns the per-track features (B, N, W). """
    tokens = _step_tokens(model.fusion, pyramids, positions, step, observed_frames, frame_rate)
    features = model.fusion.step(cache, tokens, positions.shape[1], step_index=step + 1)
    cache.commit()
    return features


def rollout_samples(model: ArfmModel, episode: Episode, queries: np.ndarray, conditioning_frames: int = 1,
                    horizon: int = 50, seed: int = 0, sample_steps: int = 16, num_samples: int = 1,
                    condition: typing.Optional[int] = None) -> np.ndarray:
    """
    Predict `horizon` frames past the observed prefix for several independent samples at once.
    Observed frames are fed back as ground truth, later frames are the model's own samples.
    :param queries: point ids or query positions
    :param condition: condition token to predict under instead of the episode's own
    :return: float32 array (S, N, conditioning_frames + horizon, 2); the prefix is the ground truth
    """
    if conditioning_frames < 1 or conditioning_frames > episode.length:
        raise ValueError(f"conditioning_frames must be in [1, {episode.length}], got {conditioning_frames}")
    if horizon < 0 or num_samples < 1:
        raise ValueError("horizon must be >= 0 and num_samples >= 1")
    observed = torch.from_numpy(np.ascontiguousarray(observed_tracks(episode, queries, conditioning_frames)))
    num_points = observed.shape[0]
    positions = torch.zeros(num_samples, num_points, conditioning_frames + horizon, 2)
    positions[:, :, :conditioning_frames] = observed[None]
    if horizon == 0:
        return positions.numpy()

    model.eval()
    generator = torch.Generator().manual_seed(seed)
    pyramids = render_pyramids(model, episode, range(conditioning_frames))
    condition = episode.condition_token if condition is None else condition
    condition = torch.full((num_samples,), int(condition), dtype=torch.long)
    frame_rate = torch.full((num_samples,), episode.frame_rate)
    with torch.no_grad():
        cache = _start_cache(model, condition, frame_rate, num_points)
        previous = torch.zeros(num_samples, num_points, 2)
        for step in range(conditioning_frames - 1 + horizon):
            features = _advance(model, cache, pyramids, positions[:, :, step], step, conditioning_frames, frame_rate)
            if step < conditioning_frames - 1:
                shift = positions[:, :, step + 1] - positions[:, :, step]
            else:
                shift = model.sample_shift(features, previous, sample_steps, generator)
                positions[:, :, step + 1] = positions[:, :, step] + shift
            previous = shift
    return positions.numpy()


def rollout(model: ArfmModel, episode: Episode, queries: np.ndarray, conditioning_frames: int = 1,
            horizon: int = 50, seed: int = 0, sample_steps: int = 16,
            condition: typing.Optional[int] = None) -> TrackSet:
    """ Single-sample rollout as a track set over frames 0..conditioning_frames + horizon - 1. """
    points = rollout_samples(model, episode, queries, conditioning_frames, horizon, seed, sample_steps,
                             condition=condition)[0]
    return TrackSet(points, frame_rate=episode.frame_rate)


@dataclass
class HorizonState:
    episode: Episode
    point_ids: np.ndarray
    fixed: torch.Tensor
    horizon_shifts: torch.Tensor
    cache: AttentionCache
    pyramids: list
    condition: torch.Tensor
    frame_rate: torch.Tensor

    def __repr__(self) -> str:
        return f"<HorizonState (observed: {self.observed_frames}, horizon: {self.horizon_length})>"

    @property
    def observed_frames(self) -> int:
        return self.fixed.shape[2]

    @property
    def horizon_length(self) -> int:
        return self.horizon_shifts.shape[2] + 1

    @property
    def horizon(self) -> torch.Tensor:
        """ (1, N, h, 2) positions of the last verified frame and the h - 1 predicted frames after it. """
        start = self.fixed[:, :, -1:]
        return torch.cat([start, start + torch.cumsum(self.horizon_shifts, dim=2)], dim=2)


def _extend_horizon(model: ArfmModel, cache: AttentionCache, state_inputs: dict, start: torch.Tensor,
                    previous: torch.Tensor, first_step: int, count: int, generator: torch.Generator,
                    sample_steps: int, old_shifts: typing.Optional[torch.Tensor] = None, t_e: float = 1.0,
                    edit_steps: int = 0) -> torch.Tensor:
    """
    Predict `count` shifts from `start`, editing old shifts where given and sampling fresh ones after them.
    Works on a fork of `cache`.
    """
    fork = cache.fork()
    position, shifts = start, []
    for offset in range(count):
        step = first_step + offset
        features = _advance(model, fork, state_inputs["pyramids"], position, step, state_inputs["observed"],
                            state_inputs["frame_rate"])
        if old_shifts is not None and offset < old_shifts.shape[2]:
            shift = model.edit_shift(features, previous, old_shifts[:, :, offset], t_e, edit_steps, generator)
        else:
            shift = model.sample_shift(features, previous, sample_steps, generator)
        position = position + shift
        previous = shift
        shifts.append(shift)
    return torch.stack(shifts, dim=2) if shifts else torch.zeros(start.shape[0], start.shape[1], 0, 2)


def init_horizon(model: ArfmModel, episode: Episode, point_ids: np.ndarray, conditioning_frames: int = 1,
                 horizon_length: int = 16, seed: int = 0, sample_steps: int = 16) -> HorizonState:
    """
    Observe the first frames and predict the initial horizon of `horizon_length` frames,
    starting at the last observed frame.
    """
    if horizon_length < 1:
        raise ValueError(f"horizon_length must be >= 1, got {horizon_length}")
    point_ids = np.asarray(point_ids)
    fixed = torch.from_numpy(np.ascontiguousarray(observed_tracks(episode, point_ids, conditioning_frames)))[None]
    pyramids = render_pyramids(model, episode, range(conditioning_frames))
    condition = torch.tensor([int(episode.condition_token)])
    frame_rate = torch.tensor([episode.frame_rate])
    generator = torch.Generator().manual_seed(seed)
    model.eval()
    with torch.no_grad():
        cache = _start_cache(model, condition, frame_rate, fixed.shape[1])
        previous = torch.zeros(1, fixed.shape[1], 2)
        for step in range(conditioning_frames - 1):
            _advance(model, cache, pyramids, fixed[:, :, step], step, conditioning_frames, frame_rate)
            previous = fixed[:, :, step + 1] - fixed[:, :, step]
        inputs = {"pyramids": pyramids, "observed": conditioning_frames, "frame_rate": frame_rate}
        shifts = _extend_horizon(model, cache, inputs, fixed[:, :, -1], previous, conditioning_frames - 1,
                                 horizon_length - 1, generator, sample_steps)
    return HorizonState(episode=episode, point_ids=point_ids, fixed=fixed, horizon_shifts=shifts, cache=cache,
                        pyramids=pyramids, condition=condition, frame_rate=frame_rate)


def update_horizon(model: ArfmModel, state: HorizonState, t_e: float = 0.8, edit_steps: int = 4, seed: int = 0,
                   sample_steps: int = 16) -> HorizonState:
    """
    Take the next tracked frame, splice it in as verified and re-plan the horizon:
    the remaining old shifts are renoised to flow time t_e and denoised again,
    one fresh shift is sampled at the end. The given state is left untouched.
    """
    episode, frame = state.episode, state.observed_frames
    if frame >= episode.length:
        raise ValueError(f"episode has no frame {frame} to track")
    if state.cache.seen_steps != frame:
        raise CacheError(f"cache holds {state.cache.seen_steps} steps, expected {frame}")
    if edit_steps == 0 and t_e != 1.0:
        raise ValueError("edit_steps = 0 requires t_e = 1")
    verified = torch.from_numpy(online_track_next(episode, state.point_ids, frame))[None]
    generator = torch.Generator().manual_seed(seed)
    pyramids = state.pyramids + render_pyramids(model, episode, [frame])
    fixed = torch.cat([state.fixed, verified[:, :, None]], dim=2)
    model.eval()
    with torch.no_grad():
        cache = state.cache.fork()
        inputs = {"pyramids": pyramids, "observed": frame + 1, "frame_rate": state.frame_rate}
        _advance(model, cache, pyramids, state.fixed[:, :, -1], frame - 1, frame + 1, state.frame_rate)
        previous = verified - state.fixed[:, :, -1]
        shifts = _extend_horizon(model, cache, inputs, verified, previous, frame, state.horizon_length - 1,
                                 generator, sample_steps, old_shifts=state.horizon_shifts[:, :, 1:], t_e=t_e,
                                 edit_steps=edit_steps)
    logger.debug("Updated horizon at frame %d", frame)
    return HorizonState(episode=episode, point_ids=state.point_ids, fixed=fixed, horizon_shifts=shifts, cache=cache,
                        pyramids=pyramids, condition=state.condition, frame_rate=state.frame_rate)


def resample_horizon(model: ArfmModel, state: HorizonState, seed: int = 0, sample_steps: int = 16) -> HorizonState:
    """ Like update_horizon but every shift of the new horizon is sampled from scratch. """
    return update_horizon(model, state, t_e=0.0, edit_steps=sample_steps, seed=seed, sample_steps=sample_steps)


def horizon_edit_distance(before: HorizonState, after: HorizonState) -> float:
    """
    Mean distance between the predicted frames both horizons share, excluding the newly verified frame.
    """
    old = before.horizon[:, :, 2:]
    new = after.horizon[:, :, 1:1 + old.shape[2]]
    if old.shape[2] == 0:
        return 0.0
    old = old[:, :, :new.shape[2]]
    return float(torch.linalg.norm(old - new, dim=-1).mean())
