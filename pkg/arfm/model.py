from __future__ import annotations

import dataclasses
import logging
import typing
from dataclasses import dataclass

import torch
from torch import nn

from arfm.flow import FlowConfig
from arfm.flow import FlowPredictor
from arfm.flow import denoise_from
from arfm.flow import denoise_timestep
from arfm.flow import fm_loss
from arfm.flow import noise_targets
from arfm.flow import regression_loss
from arfm.fusion import FeatureFusion
from arfm.fusion import FusionConfig

logger = logging.getLogger(__name__)

OBJECTIVES = ("flow", "regression")


@dataclass
class ModelConfig:
    fusion: FusionConfig = dataclasses.field(default_factory=FusionConfig)
    flow: FlowConfig = dataclasses.field(default_factory=FlowConfig)
    objective: str = "flow"

    def __post_init__(self) -> None:
        assert self.objective in OBJECTIVES, f"objective must be one of {OBJECTIVES}"
        assert self.flow.feature_width == self.fusion.width, "flow.feature_width must equal fusion.width"

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        for section in ("fusion", "flow"):
            data[section] = {key: list(value) if isinstance(value, tuple) else value
                             for key, value in data[section].items()}
        return data


@dataclass
class TrainBatch:
    local: torch.Tensor
    global_feats: torch.Tensor
    visible: torch.Tensor
    condition: torch.Tensor
    frame_rate: torch.Tensor
    targets: torch.Tensor
    cond_shifts: torch.Tensor

    @property
    def num_points(self) -> int:
        return self.targets.shape[2]


class ArfmModel(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        """ Fusion transformer plus per-step shift predictor. """
        super().__init__()
        self.config = config
        self.fusion = FeatureFusion(config.fusion)
        self.flow = FlowPredictor(config.flow)

    def __repr__(self) -> str:
        params = sum(param.numel() for param in self.parameters())
        return f"<ArfmModel (objective: {self.config.objective}, parameters: {params})>"

    @property
    def objective(self) -> str:
        return self.config.objective

    @property
    def shift_scale(self) -> float:
        return self.config.flow.shift_scale

    def features(self, batch: TrainBatch) -> torch.Tensor:
        """ :return: per-track features (B, T, N, W) of every prediction step """
        tokens = self.fusion.build_tokens(batch.local, batch.global_feats, batch.visible, batch.condition,
                                          batch.frame_rate)
        return self.fusion(tokens, batch.num_points)[:, 1:]

    def loss(self, batch: TrainBatch, generator: typing.Optional[torch.Generator] = None,
             noise: typing.Optional[torch.Tensor] = None, t: typing.Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Flow-matching loss with one flow time per (batch, step) row, or plain
        regression of the shift for the regression objective.
        """
        features = self.features(batch)
        targets = batch.targets / self.shift_scale
        cond_shifts = batch.cond_shifts / self.shift_scale
        if self.objective == "regression":
            prediction = self.flow.predict_velocity(features, torch.zeros_like(targets), cond_shifts, 1.0)
            return regression_loss(prediction, targets)
        if noise is None:
            noise = torch.randn(targets.shape, generator=generator, dtype=targets.dtype)
        if t is None:
            t = torch.rand(targets.shape[:2], generator=generator, dtype=targets.dtype)
        noised = noise_targets(targets, noise, t)
        return fm_loss(self.flow.predict_velocity(features, noised.noised, cond_shifts, noised.t), noised)

    def sample_shift(self, features: torch.Tensor, cond_shifts: torch.Tensor, steps: int,
                     generator: typing.Optional[torch.Generator] = None) -> torch.Tensor:
        """
        :param features: per-track features (..., N, W)
        :param cond_shifts: previous shifts in pixels (..., N, 2)
        :return: next shifts in pixels
        """
        cond = cond_shifts / self.shift_scale
        if self.objective == "regression":
            x = self.flow.predict_velocity(features, torch.zeros_like(cond), cond, 1.0)
        else:
            x = denoise_timestep(self.flow, features, cond, steps, generator=generator)
        return x * self.shift_scale

    def edit_shift(self, features: torch.Tensor, cond_shifts: torch.Tensor, previous: torch.Tensor, t_e: float,
                   steps: int, generator: typing.Optional[torch.Generator] = None) -> torch.Tensor:
        """
        Partially renoise a previously predicted shift to flow time t_e and denoise it again.
        t_e = 1 with zero steps returns `previous` bit for bit.
        """
        if not 0.0 <= t_e <= 1.0:
            raise ValueError(f"t_e must be in [0, 1], got {t_e}")
        if self.objective == "regression":
            return previous.clone() if t_e == 1.0 else self.sample_shift(features, cond_shifts, steps, generator)
        noise = torch.randn(previous.shape, generator=generator, dtype=previous.dtype)
        x_init = t_e * (previous / self.shift_scale) + (1.0 - t_e) * noise
        x = denoise_from(self.flow, features, cond_shifts / self.shift_scale, x_init, t_e, steps)
        return x * self.shift_scale
