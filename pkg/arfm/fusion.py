from __future__ import annotations

import logging
import typing
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from arfm.layers import AttentionCache
from arfm.layers import CacheError
from arfm.layers import LayerNorm
from arfm.layers import Linear
from arfm.layers import ShapeError
from arfm.layers import TransformerBlock
from arfm.pyramid import CONDITION_CHANNELS
from arfm.pyramid import FeaturePyramid
from arfm.world import ConditionToken

logger = logging.getLogger(__name__)


@dataclass
class FusionConfig:
    width: int = 128
    layers: int = 8
    heads: int = 4
    mlp_ratio: int = 4
    max_points: int = 100
    max_timesteps: int = 50
    canvas: int = 256
    local_strides: tuple = (4, 8, 16)
    local_channels: int = 8
    global_stride: int = 32
    global_channels: int = 16
    reference_frame_rate: float = 25.0

    def __post_init__(self) -> None:
        assert self.layers >= 2 and self.layers % 2 == 0, "fusion layers alternate temporal/spatial, need an even count"
        assert self.width % self.heads == 0, "heads must divide width"
        assert self.global_channels > 3 + CONDITION_CHANNELS, "global level needs identity channels beside the condition"

    @property
    def local_features(self) -> int:
        return len(self.local_strides) * self.local_channels

    @property
    def num_global_tokens(self) -> int:
        return (self.canvas // self.global_stride) ** 2

    @property
    def scene_size(self) -> int:
        """ Flattened global level without its condition channels. """
        return self.num_global_tokens * (self.global_channels - CONDITION_CHANNELS)


@dataclass
class IndexDiagnostics:
    lookups: int = 0
    clamped: int = 0


def index_pyramid(pyramids: list[FeaturePyramid], inputs: np.ndarray,
                  conditioning_frames: int) -> tuple[np.ndarray, IndexDiagnostics]:
    """
    Local features of every input position. Step t reads the pyramid of frame
    min(t, conditioning_frames - 1), so later steps never see unobserved frames.
    :param inputs: positions of shape (N, T, 2)
    :return: float32 features of shape (T, N, C) and lookup diagnostics
    """
    if conditioning_frames < 1 or conditioning_frames > len(pyramids):
        raise ValueError(f"need pyramids for {conditioning_frames} frames, got {len(pyramids)}")
    inputs = np.asarray(inputs)
    diagnostics = IndexDiagnostics()
    features = []
    for step in range(inputs.shape[1]):
        pyramid = pyramids[min(step, conditioning_frames - 1)]
        values, clamped = pyramid.local_features_at(inputs[:, step])
        features.append(values)
        diagnostics.lookups += inputs.shape[0]
        diagnostics.clamped += clamped
    if diagnostics.clamped:
        logger.debug("Clamped %d of %d pyramid lookups", diagnostics.clamped, diagnostics.lookups)
    return np.stack(features).astype(np.float32), diagnostics


def global_tokens(pyramids: list[FeaturePyramid], steps: int, conditioning_frames: int) -> np.ndarray:
    """ :return: float32 global cells of shape (T, G, C) following the same frame rule as index_pyramid """
    return np.stack([pyramids[min(step, conditioning_frames - 1)].global_tokens for step in range(steps)])


class FeatureFusion(nn.Module):
    """
    Transformer over a (time, token) grid whose layers alternate between causal
    attention along time and bidirectional attention across the tokens of a step.
    Slot 0 of the time axis holds the condition token.
    """

    def __init__(self, config: FusionConfig) -> None:
        super().__init__()
        self.config = config
        width = config.width
        self.local_proj = Linear(config.local_features, width)
        self.global_proj = Linear(config.global_channels, width)
        self.visibility_embed = nn.Embedding(2, width)
        self.condition_embed = nn.Embedding(len(ConditionToken), width)
        self.frame_rate_proj = Linear(1, width)
        self.time_embed = nn.Parameter(torch.randn(config.max_timesteps + 1, width) * 0.02)
        self.blocks = nn.ModuleList([TransformerBlock(width, config.heads, config.mlp_ratio)
                                     for _ in range(config.layers)])
        self.norm = LayerNorm(width)

    @property
    def num_temporal_layers(self) -> int:
        return self.config.layers // 2

    def new_cache(self) -> AttentionCache:
        return AttentionCache(self.num_temporal_layers)

    def _slot_embedding(self, first_slot: int, slots: int, frame_rate: torch.Tensor) -> torch.Tensor:
        if first_slot < 0 or first_slot + slots > self.config.max_timesteps + 1:
            raise ValueError(f"time slots [{first_slot}, {first_slot + slots}) exceed "
                             f"max_timesteps={self.config.max_timesteps}")
        rate = (frame_rate.to(self.time_embed.dtype) / self.config.reference_frame_rate)[:, None]
        return self.time_embed[first_slot:first_slot + slots][None, :, None, :] \
            + self.frame_rate_proj(rate)[:, None, None, :]

    def condition_tokens(self, condition: torch.Tensor, frame_rate: torch.Tensor, num_tokens: int) -> torch.Tensor:
        """ :return: slot 0 of shape (B, 1, S, W) """
        tokens = self.condition_embed(condition)[:, None, None, :].expand(-1, 1, num_tokens, -1)
        return tokens + self._slot_embedding(0, 1, frame_rate)

    def step_tokens(self, local: torch.Tensor, global_feats: torch.Tensor, visible: torch.Tensor,
                    frame_rate: torch.Tensor, first_slot: int) -> torch.Tensor:
        """
        :param local: indexed local features (B, T, N, C_local)
        :param global_feats: global cells (B, T, G, C_global)
        :param visible: (B, T) flag of steps whose input frame was observed
        :return: tokens of shape (B, T, N + G, W)
        """
        if local.shape[:2] != global_feats.shape[:2] or local.shape[:2] != visible.shape:
            raise ShapeError(f"local {tuple(local.shape)}, global {tuple(global_feats.shape)}, "
                             f"visible {tuple(visible.shape)} disagree on (B, T)")
        if local.shape[2] > self.config.max_points:
            raise ShapeError(f"{local.shape[2]} tracks exceed max_points={self.config.max_points}")
        track = self.local_proj(local) + self.visibility_embed(visible.long())[:, :, None, :]
        tokens = torch.cat([track, self.global_proj(global_feats)], dim=2)
        return tokens + self._slot_embedding(first_slot, tokens.shape[1], frame_rate)

    def build_tokens(self, local: torch.Tensor, global_feats: torch.Tensor, visible: torch.Tensor,
                     condition: torch.Tensor, frame_rate: torch.Tensor) -> torch.Tensor:
        steps = self.step_tokens(local, global_feats, visible, frame_rate, first_slot=1)
        return torch.cat([self.condition_tokens(condition, frame_rate, steps.shape[2]), steps], dim=1)

    def _run_block(self, index: int, x: torch.Tensor, cache: typing.Optional[AttentionCache]) -> torch.Tensor:
        batch, steps, tokens, width = x.shape
        block = self.blocks[index]
        if index % 2 == 0:
            x = x.permute(0, 2, 1, 3).reshape(batch * tokens, steps, width)
            x = block(x, mask_mode="causal", cache=cache, layer=index // 2)
            return x.reshape(batch, tokens, steps, width).permute(0, 2, 1, 3)
        x = block(x.reshape(batch * steps, tokens, width), mask_mode="none")
        return x.reshape(batch, steps, tokens, width)

    def forward(self, tokens: torch.Tensor, num_points: int) -> torch.Tensor:
        """
        :param tokens: (B, T', S, W) with the condition slot first
        :return: per-track features of shape (B, T', N, W)
        """
        x = tokens
        for index in range(len(self.blocks)):
            x = self._run_block(index, x, cache=None)
        return self.norm(x[:, :, :num_points])

    def step(self, cache: AttentionCache, tokens: torch.Tensor, num_points: int, step_index: int) -> torch.Tensor:
        """
        Process one new time slot against the cached history. The caller commits the cache.
        :param tokens: (B, 1, S, W)
        :param step_index: slot index of `tokens`; must equal the number of committed slots
        :return: per-track features of shape (B, N, W)
        """
        if step_index != cache.seen_steps:
            raise CacheError(f"step {step_index} out of order, cache holds {cache.seen_steps} steps")
        if tokens.shape[1] != 1:
            raise ShapeError("step processes exactly one time slot")
        x = tokens
        for index in range(len(self.blocks)):
            x = self._run_block(index, x, cache=cache)
        return self.norm(x[:, 0, :num_points])
