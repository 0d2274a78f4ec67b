"""
Synthetic stand-in for a frozen image encoder: per-frame feature grids
rasterized from the oracle point cloud at several strides.

Channel layout of every level: occupancy count, mean velocity (2), mean
entity identity code. The global level ends with the episode condition token
as a one-hot (NONE, LEFT, RIGHT) broadcast over the grid.
"""
from __future__ import annotations

import logging
import typing
from dataclasses import dataclass

import numpy as np

if typing.TYPE_CHECKING:
    from arfm.world import Episode

logger = logging.getLogger(__name__)

LOCAL_STRIDES = (4, 8, 16)
LOCAL_CHANNELS = 8
GLOBAL_STRIDE = 32
GLOBAL_CHANNELS = 16
CONDITION_CHANNELS = 3
IDENTITY_SEED = 7919


@dataclass
class FeaturePyramid:
    frame: int
    local_levels: list
    global_level: np.ndarray
    local_strides: tuple
    global_stride: int

    def __repr__(self) -> str:
        return f"<FeaturePyramid (frame: {self.frame}, levels: {len(self.local_levels)})>"

    @property
    def local_channels(self) -> int:
        return sum(level.shape[-1] for level in self.local_levels)

    @property
    def global_tokens(self) -> np.ndarray:
        """ Global cells flattened row-major to (cells, channels). """
        return self.global_level.reshape(-1, self.global_level.shape[-1])

    def local_features_at(self, positions: np.ndarray) -> tuple[np.ndarray, int]:
        """
        Concatenate the local cells containing each position over all local levels.
        Out-of-range positions are clamped to the border cell.
        :param positions: pixel positions of shape (N, 2)
        :return: features of shape (N, local_channels) and the number of clamped lookups
        """
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        features, clamped = [], 0
        for level, stride in zip(self.local_levels, self.local_strides):
            cells, outside = cell_index(positions, stride, level.shape[0])
            clamped += int(outside.sum())
            features.append(level[cells[:, 1], cells[:, 0]])
        return np.concatenate(features, axis=-1), clamped


def cell_index(positions: np.ndarray, stride: int, extent: int) -> tuple[np.ndarray, np.ndarray]:
    """
    :return: integer (x, y) cells of shape (N, 2), clamped to the grid, and a mask of clamped rows
    """
    cells = np.floor(np.asarray(positions, dtype=np.float64) / stride).astype(np.int64)
    outside = ((cells < 0) | (cells >= extent)).any(axis=-1)
    return np.clip(cells, 0, extent - 1), outside


def identity_codes(num_entities: int, channels: int) -> np.ndarray:
    """ Fixed random code per entity id; background is entity 0. """
    return np.stack([np.random.default_rng((IDENTITY_SEED, entity_id)).uniform(-1.0, 1.0, channels)
                     for entity_id in range(num_entities)])


def rasterize(positions: np.ndarray, velocities: np.ndarray, codes: np.ndarray, canvas: int,
              stride: int) -> np.ndarray:
    """
    Occupancy count, then per-cell means of velocity and identity code.
    :param codes: identity code of every point, shape (N, K)
    :return: float32 grid of shape (canvas // stride, canvas // stride, 3 + K)
    """
    assert canvas % stride == 0, f"stride {stride} must divide canvas {canvas}"
    extent = canvas // stride
    cells, _ = cell_index(positions, stride, extent)
    flat = cells[:, 1] * extent + cells[:, 0]
    counts = np.bincount(flat, minlength=extent * extent).astype(np.float64)
    values = np.concatenate([velocities, codes], axis=-1).astype(np.float64)
    sums = np.zeros((extent * extent, values.shape[-1]))
    np.add.at(sums, flat, values)
    means = sums / np.maximum(counts, 1.0)[:, None]
    grid = np.concatenate([counts[:, None], means], axis=-1)
    return grid.reshape(extent, extent, -1).astype(np.float32)


def render_pyramid(episode: Episode, frame: int, local_strides: tuple = LOCAL_STRIDES,
                   local_channels: int = LOCAL_CHANNELS, global_stride: int = GLOBAL_STRIDE,
                   global_channels: int = GLOBAL_CHANNELS, use_cache: bool = True) -> FeaturePyramid:
    """
    Feature pyramid of one frame. Only visible points are rasterized.
    """
    if not 0 <= frame < episode.length:
        raise ValueError(f"frame must be in [0, {episode.length}), got {frame}")
    key = (frame, tuple(local_strides), local_channels, global_stride, global_channels)
    if use_cache and key in episode.pyramid_cache:
        return episode.pyramid_cache[key]
    assert local_channels > 3 and global_channels > 3 + CONDITION_CHANNELS, "too few channels for the layout"

    canvas = episode.spec.canvas
    visible = episode.visibility[:, frame]
    positions = episode.positions[visible, frame]
    velocities = episode.velocities[visible, frame]
    entity_ids = episode.point_entity[visible]
    num_entities = len(episode.entities)

    local_codes = identity_codes(num_entities, local_channels - 3)[entity_ids]
    local_levels = [rasterize(positions, velocities, local_codes, canvas, stride) for stride in local_strides]

    global_codes = identity_codes(num_entities, global_channels - 3 - CONDITION_CHANNELS)[entity_ids]
    global_level = rasterize(positions, velocities, global_codes, canvas, global_stride)
    condition = np.zeros(global_level.shape[:2] + (CONDITION_CHANNELS,), dtype=np.float32)
    condition[..., int(episode.condition_token)] = 1.0
    global_level = np.concatenate([global_level, condition], axis=-1)

    pyramid = FeaturePyramid(frame=frame, local_levels=local_levels, global_level=global_level,
                             local_strides=tuple(local_strides), global_stride=global_stride)
    if use_cache:
        episode.pyramid_cache[key] = pyramid
    return pyramid
