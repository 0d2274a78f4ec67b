"""
Training loops of the track predictor, the query predictor and the downstream models.
"""
from __future__ import annotations

import logging
import typing
from dataclasses import dataclass

import numpy as np
import torch
from tqdm import tqdm

from arfm.fusion import FusionConfig
from arfm.fusion import global_tokens
from arfm.fusion import index_pyramid
from arfm.model import ArfmModel
from arfm.model import TrainBatch
from arfm.optim import EmaState
from arfm.optim import OptimizerState
from arfm.optim import adamw_step
from arfm.pyramid import CONDITION_CHANNELS
from arfm.pyramid import render_pyramid
from arfm.query import QueryConfig
from arfm.query import QueryPredictorModel
from arfm.query import query_examples
from arfm.query import query_train_step
from arfm.track_encoder import DownstreamBatch
from arfm.track_encoder import DownstreamModel
from arfm.track_encoder import EncoderConfig
from arfm.track_encoder import downstream_targets
from arfm.track_encoder import downstream_train_step
from arfm.tracks import SamplingSpec
from arfm.tracks import draw_temperature
from arfm.tracks import filter_visibility
from arfm.tracks import make_train_tensors
from arfm.tracks import subsample_tracks

if typing.TYPE_CHECKING:
    from arfm.config import TrainConfig
    from arfm.world import Episode

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    losses: list
    optimizer: OptimizerState
    ema: typing.Optional[EmaState] = None

    def __repr__(self) -> str:
        last = self.losses[-1] if self.losses else float("nan")
        return f"<TrainResult (steps: {len(self.losses)}, last loss: {last:.4f})>"


def _pyramids(episode: Episode, fusion: FusionConfig, frames: typing.Iterable[int]) -> list:
    return [render_pyramid(episode, frame, fusion.local_strides, fusion.local_channels, fusion.global_stride,
                           fusion.global_channels) for frame in frames]


def make_train_batch(episodes: list[Episode], rng: np.random.Generator, fusion: FusionConfig,
                     config: TrainConfig) -> TrainBatch:
    """
    One training example per episode: a random window, a random number of
    conditioning frames, visibility filtering and movement-weighted track
    subsampling. All examples use the same number of tracks, the smallest
    number that every episode can supply.
    """
    windows = []
    for episode in episodes:
        length = min(config.window, episode.length)
        start = int(rng.integers(0, episode.length - length + 1))
        conditioning_frames = int(rng.integers(1, length))
        tracks = episode.tracks().window(start, length)
        survivors = filter_visibility(tracks, conditioning_frames, config.min_visibility)
        windows.append((episode, start, conditioning_frames, tracks.subset(survivors)))
    num_points = min([config.num_points, fusion.max_points] + [len(tracks) for *_, tracks in windows])

    local, cells, visible, targets, cond_shifts = [], [], [], [], []
    for episode, start, conditioning_frames, tracks in windows:
        spec = SamplingSpec(temperature=draw_temperature(rng, *config.temperature), count=num_points)
        chosen = subsample_tracks(tracks, spec, seed=int(rng.integers(2 ** 31)))
        tensors = make_train_tensors(chosen)
        pyramids = _pyramids(episode, fusion, range(start, start + conditioning_frames))
        steps = tensors.inputs.shape[1]
        local.append(index_pyramid(pyramids, tensors.inputs, conditioning_frames)[0])
        cells.append(global_tokens(pyramids, steps, conditioning_frames))
        visible.append(np.arange(steps) < conditioning_frames)
        targets.append(tensors.targets.transpose(1, 0, 2))
        cond_shifts.append(tensors.cond_shifts.transpose(1, 0, 2))

    return TrainBatch(local=torch.from_numpy(np.stack(local)),
                      global_feats=torch.from_numpy(np.stack(cells).astype(np.float32)),
                      visible=torch.from_numpy(np.stack(visible)),
                      condition=torch.tensor([int(episode.condition_token) for episode in episodes]),
                      frame_rate=torch.tensor([episode.frame_rate for episode in episodes], dtype=torch.float32),
                      targets=torch.from_numpy(np.stack(targets).astype(np.float32)),
                      cond_shifts=torch.from_numpy(np.stack(cond_shifts).astype(np.float32)))


def train_arfm(model: ArfmModel, episodes: list[Episode], config: TrainConfig,
               callback: typing.Optional[typing.Callable[[int, float], None]] = None) -> TrainResult:
    """
    Train the track predictor with AdamW, gradient clipping and an EMA of the weights.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = OptimizerState(model.parameters(), lr=config.lr, weight_decay=config.weight_decay,
                               betas=tuple(config.betas), eps=config.eps, clip_norm=config.clip_norm)
    ema = EmaState(model, decay=config.ema_decay, interval=config.ema_interval, warmup=config.ema_warmup)
    losses = []
    for step in tqdm(range(1, config.steps + 1), desc=f"train {model.objective}", disable=not config.progress):
        batch_episodes = [episodes[index] for index in rng.integers(0, len(episodes), config.batch_size)]
        batch = make_train_batch(batch_episodes, rng, model.config.fusion, config)
        model.train()
        loss = model.loss(batch, generator=generator)
        loss.backward()
        adamw_step(optimizer)
        ema.maybe_update(step, model)
        losses.append(loss.item())
        if step % config.log_every == 0:
            logger.info("step %d/%d: loss %.5f", step, config.steps, np.mean(losses[-config.log_every:]))
        if callback is not None:
            callback(step, losses[-1])
    return TrainResult(losses=losses, optimizer=optimizer, ema=ema)


def train_query(model: QueryPredictorModel, episodes: list[Episode], fusion: FusionConfig, query: QueryConfig,
                config: TrainConfig) -> TrainResult:
    """ Regress the future movement of points from their first-frame local features. """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = OptimizerState(model.parameters(), lr=query.lr, weight_decay=config.weight_decay,
                               clip_norm=config.clip_norm)
    losses = []
    for step in tqdm(range(1, query.steps + 1), desc="train query", disable=not config.progress):
        features, targets = [], []
        for index in rng.integers(0, len(episodes), query.batch_size):
            episode = episodes[index]
            pyramid = _pyramids(episode, fusion, [0])[0]
            x, y = query_examples(episode, pyramid, query.points_per_episode, rng)
            features.append(x)
            targets.append(y)
        losses.append(query_train_step(model, optimizer, np.concatenate(features), np.concatenate(targets)))
        if step % config.log_every == 0:
            logger.info("query step %d/%d: loss %.5f", step, query.steps, np.mean(losses[-config.log_every:]))
    return TrainResult(losses=losses, optimizer=optimizer)


def scene_features(episode: Episode, fusion: FusionConfig) -> np.ndarray:
    """ Flattened global cells of the first frame. The condition channels are left out. """
    return _pyramids(episode, fusion, [0])[0].global_level[..., :-CONDITION_CHANNELS].reshape(-1)


def downstream_examples(episodes: list[Episode], fusion: FusionConfig, encoder: EncoderConfig,
                        tracks_fn: typing.Optional[typing.Callable[[Episode], np.ndarray]] = None) -> DownstreamBatch:
    """
    Scenes, targets and (when `tracks_fn` is given) the tracks fed to the downstream model.
    :param tracks_fn: maps an episode to tracks of shape (N, track_length, 2)
    """
    scenes, sides, velocities, tracks = [], [], [], []
    for episode in episodes:
        side, velocity = downstream_targets(episode, encoder.track_length - 1)
        scenes.append(scene_features(episode, fusion))
        sides.append(side)
        velocities.append(velocity)
        if tracks_fn is not None:
            tracks.append(np.asarray(tracks_fn(episode), dtype=np.float32))
    return DownstreamBatch(scene=torch.from_numpy(np.stack(scenes)), side=torch.tensor(sides, dtype=torch.float32),
                           velocity=torch.from_numpy(np.stack(velocities)),
                           tracks=torch.from_numpy(np.stack(tracks)) if tracks else None)


def train_downstream(model: DownstreamModel, examples: DownstreamBatch, encoder: EncoderConfig,
                     config: TrainConfig) -> TrainResult:
    """ Minibatch training of a downstream model on precomputed examples. """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = OptimizerState(model.parameters(), lr=encoder.lr, weight_decay=config.weight_decay,
                               clip_norm=config.clip_norm)
    count = examples.scene.shape[0]
    losses = []
    for step in tqdm(range(1, encoder.steps + 1), desc="train downstream", disable=not config.progress):
        index = torch.from_numpy(rng.integers(0, count, min(encoder.batch_size, count)))
        batch = DownstreamBatch(scene=examples.scene[index], side=examples.side[index],
                                velocity=examples.velocity[index],
                                tracks=None if examples.tracks is None else examples.tracks[index])
        losses.append(downstream_train_step(model, optimizer, batch))
        if step % config.log_every == 0:
            logger.info("downstream step %d/%d: loss %.5f", step, encoder.steps, np.mean(losses[-config.log_every:]))
    return TrainResult(losses=losses, optimizer=optimizer)
