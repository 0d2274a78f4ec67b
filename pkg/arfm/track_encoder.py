from __future__ import annotations

import logging
import typing
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from arfm.checkpoint import Checkpoint
from arfm.layers import LayerNorm
from arfm.layers import Linear
from arfm.layers import ShapeError
from arfm.layers import TransformerBlock
from arfm.layers import fourier_embed
from arfm.optim import OptimizerState
from arfm.optim import adamw_step
from arfm.world import ConditionToken

if typing.TYPE_CHECKING:
    from arfm.world import Episode

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    width: int = 64
    layers: int = 2
    heads: int = 4
    num_bands: int = 8
    track_length: int = 21
    num_points: int = 16
    canvas: int = 256
    shift_scale: float = 8.0
    hidden: int = 128
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3


def track_shift_features(tracks: torch.Tensor, shift_scale: float = 8.0) -> torch.Tensor:
    """ Flattened normalized shifts: (B, N, L, 2) -> (B, N, 2 * (L - 1)). """
    return ((tracks[:, :, 1:] - tracks[:, :, :-1]) / shift_scale).flatten(-2)


class TrackEncoder(nn.Module):
    """ Embeds a set of tracks into one vector read from a learned CLS token. """

    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        self.config = config
        self.pos_proj = Linear(4 * config.num_bands, config.width)
        self.shift_proj = Linear(2 * (config.track_length - 1), config.width)
        self.cls = nn.Parameter(torch.randn(1, 1, config.width) * 0.02)
        self.blocks = nn.ModuleList([TransformerBlock(config.width, config.heads) for _ in range(config.layers)])
        self.norm = LayerNorm(config.width)

    def forward(self, tracks: torch.Tensor) -> torch.Tensor:
        """
        :param tracks: (B, N, L, 2) with L equal to the configured track length
        :return: (B, width)
        """
        if tracks.dim() != 4 or tracks.shape[2] != self.config.track_length:
            raise ShapeError(f"expected tracks (B, N, {self.config.track_length}, 2), got {tuple(tracks.shape)}")
        tokens = self.pos_proj(fourier_embed(tracks[:, :, 0], self.config.num_bands, self.config.canvas)) \
            + self.shift_proj(track_shift_features(tracks, self.config.shift_scale))
        x = torch.cat([self.cls.expand(tracks.shape[0], -1, -1), tokens], dim=1)
        for block in self.blocks:
            x = block(x, mask_mode="none")
        return self.norm(x[:, 0])


def encode_tracks(encoder: TrackEncoder, tracks: np.ndarray) -> np.ndarray:
    encoder.eval()
    with torch.no_grad():
        return encoder(torch.as_tensor(tracks, dtype=torch.float32)).numpy()


@dataclass
class DownstreamBatch:
    scene: torch.Tensor
    side: torch.Tensor
    velocity: torch.Tensor
    tracks: typing.Optional[torch.Tensor] = None


class DownstreamModel(nn.Module):
    def __init__(self, config: EncoderConfig, scene_features: int, use_tracks: bool = True) -> None:
        """
        Predicts the branch side and mean future velocity of the first moving
        entity from the first-frame scene features, optionally helped by tracks.
        """
        super().__init__()
        self.use_tracks = use_tracks
        self.encoder = TrackEncoder(config) if use_tracks else None
        self.track_proj = Linear(config.width, config.hidden) if use_tracks else None
        self.scene_proj = nn.Sequential(Linear(scene_features, config.hidden), nn.GELU())
        self.trunk = nn.Sequential(Linear(config.hidden, config.hidden), nn.GELU())
        self.side_head = Linear(config.hidden, 1)
        self.velocity_head = Linear(config.hidden, 2)

    def forward(self, scene: torch.Tensor,
                tracks: typing.Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
        """ :return: side logit (B,) with LEFT as the positive class, and velocity (B, 2) """
        h = self.scene_proj(scene)
        if self.use_tracks:
            if tracks is None:
                raise ValueError("this downstream model needs tracks")
            h = h + self.track_proj(self.encoder(tracks))
        h = self.trunk(h)
        return self.side_head(h).squeeze(-1), self.velocity_head(h)

    def checkpoint_arrays(self) -> dict[str, torch.Tensor]:
        arrays = {}
        for name, value in self.state_dict().items():
            if name.startswith("encoder."):
                arrays[name] = value
            else:
                arrays[f"downstream.{name}"] = value
        return arrays

    def load_checkpoint(self, checkpoint: Checkpoint) -> DownstreamModel:
        state = {name: value for name, value in checkpoint.state_dict("downstream.").items()}
        if self.use_tracks:
            state.update({f"encoder.{name}": value for name, value in checkpoint.state_dict("encoder.").items()})
        self.load_state_dict(state, strict=True)
        return self


def downstream_loss(model: DownstreamModel, batch: DownstreamBatch) -> torch.Tensor:
    side_logit, velocity = model(batch.scene, batch.tracks)
    return F.binary_cross_entropy_with_logits(side_logit, batch.side) + F.mse_loss(velocity, batch.velocity)


def downstream_train_step(model: DownstreamModel, optimizer: OptimizerState, batch: DownstreamBatch) -> float:
    model.train()
    loss = downstream_loss(model, batch)
    loss.backward()
    adamw_step(optimizer)
    return loss.item()


def downstream_predict(model: DownstreamModel, scene: torch.Tensor,
                       tracks: typing.Optional[torch.Tensor] = None) -> tuple[np.ndarray, np.ndarray]:
    """ :return: predicted side tokens (B,) and velocities (B, 2) """
    model.eval()
    with torch.no_grad():
        side_logit, velocity = model(scene, tracks)
    sides = np.where(side_logit.numpy() > 0, int(ConditionToken.LEFT), int(ConditionToken.RIGHT))
    return sides, velocity.numpy()


def downstream_targets(episode: Episode, horizon: int) -> tuple[float, np.ndarray]:
    """
    Side label (1.0 for LEFT) and mean per-frame displacement of entity 1 over frames 0..horizon.
    """
    if len(episode.entities) < 2:
        raise ValueError("downstream targets need a moving entity")
    horizon = min(horizon, episode.length - 1)
    path = episode.anchor_path(1)
    velocity = (path[horizon + 1] - path[1]) / horizon
    side = 1.0 if episode.side == ConditionToken.LEFT else 0.0
    return side, velocity.astype(np.float32)
