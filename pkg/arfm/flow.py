from __future__ import annotations

import logging
import typing
from dataclasses import dataclass

import torch
from torch import nn

from arfm.layers import LayerNorm
from arfm.layers import Linear
from arfm.layers import ShapeError
from arfm.layers import TransformerBlock
from arfm.layers import sinusoidal_embed

logger = logging.getLogger(__name__)


@dataclass
class FlowConfig:
    width: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    feature_width: int = 128
    time_embed_dim: int = 64
    sample_steps: int = 16
    shift_scale: float = 8.0

    def __post_init__(self) -> None:
        assert self.width % self.heads == 0, "heads must divide width"
        assert self.shift_scale > 0, "shift_scale must be positive"


class DenoiseError(RuntimeError):
    def __init__(self, step: int) -> None:
        super().__init__(f"denoising produced non-finite values at step {step}")
        self.step = step


@dataclass
class NoisedBatch:
    noised: torch.Tensor
    t: torch.Tensor
    noise: torch.Tensor
    target: torch.Tensor


def noise_targets(targets: torch.Tensor, noise: torch.Tensor, t: typing.Union[float, torch.Tensor]) -> NoisedBatch:
    """
    Point on the straight path x_t = t * target + (1 - t) * noise.
    :param t: flow time per leading index of `targets` (..., N, 2), or a scalar
    """
    if targets.shape != noise.shape:
        raise ShapeError(f"targets {tuple(targets.shape)} and noise {tuple(noise.shape)} differ")
    t = torch.as_tensor(t, dtype=targets.dtype, device=targets.device)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("flow time must be in [0, 1]")
    weight = t.expand(targets.shape[:-2])[..., None, None]
    return NoisedBatch(noised=weight * targets + (1 - weight) * noise, t=t.expand(targets.shape[:-2]),
                       noise=noise, target=targets)


def fm_loss(velocity: torch.Tensor, batch: NoisedBatch) -> torch.Tensor:
    """ Mean squared error against the path velocity target - noise. """
    return torch.mean((velocity - (batch.target - batch.noise)) ** 2)


def regression_loss(prediction: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return torch.mean((prediction - targets) ** 2)


class FlowPredictor(nn.Module):
    """
    Velocity field over the shifts of all tracks of one time step, with
    bidirectional attention across the tracks and no temporal attention.
    """

    def __init__(self, config: FlowConfig) -> None:
        super().__init__()
        self.config = config
        self.in_proj = Linear(config.feature_width + 4, config.width)
        self.time_proj = nn.Sequential(Linear(config.time_embed_dim, config.width), nn.GELU(),
                                       Linear(config.width, config.width))
        self.blocks = nn.ModuleList([TransformerBlock(config.width, config.heads, config.mlp_ratio)
                                     for _ in range(config.layers)])
        self.norm = LayerNorm(config.width)
        self.head = Linear(config.width, 2)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, features: torch.Tensor, noised: torch.Tensor, cond_shifts: torch.Tensor,
                t: torch.Tensor) -> torch.Tensor:
        """
        :param features: (R, N, feature_width)
        :param noised: noised normalized shifts (R, N, 2)
        :param cond_shifts: normalized previous shifts (R, N, 2)
        :param t: flow time per row (R,)
        """
        if noised.shape != cond_shifts.shape or noised.shape[:-1] != features.shape[:-1]:
            raise ShapeError(f"features {tuple(features.shape)}, noised {tuple(noised.shape)}, "
                             f"cond {tuple(cond_shifts.shape)} disagree")
        h = self.in_proj(torch.cat([features, noised, cond_shifts], dim=-1))
        h = h + self.time_proj(sinusoidal_embed(t, self.config.time_embed_dim))[:, None, :]
        for block in self.blocks:
            h = block(h, mask_mode="none")
        return self.head(self.norm(h))

    def predict_velocity(self, features: torch.Tensor, noised: torch.Tensor, cond_shifts: torch.Tensor,
                         t: typing.Union[float, torch.Tensor]) -> torch.Tensor:
        """ Same as forward for any leading shape (..., N, C); `t` is a scalar or one value per leading index. """
        lead = features.shape[:-2]
        t = torch.as_tensor(t, dtype=features.dtype, device=features.device).expand(lead).reshape(-1)
        velocity = self(features.reshape(-1, *features.shape[-2:]), noised.reshape(-1, *noised.shape[-2:]),
                        cond_shifts.reshape(-1, *cond_shifts.shape[-2:]), t)
        return velocity.reshape(*lead, *velocity.shape[-2:])


def denoise_from(predictor: FlowPredictor, features: torch.Tensor, cond_shifts: torch.Tensor, x_init: torch.Tensor,
                 t_start: float, steps: int) -> torch.Tensor:
    """
    Euler integration of the velocity field from t_start to 1.
    Zero steps are only allowed from t_start = 1 and return x_init unchanged.
    :raises DenoiseError: when an intermediate state is non-finite
    """
    if not 0.0 <= t_start <= 1.0:
        raise ValueError(f"t_start must be in [0, 1], got {t_start}")
    if steps < 0 or (steps == 0 and t_start != 1.0):
        raise ValueError(f"need at least one step to integrate from t={t_start}")
    x = x_init
    if steps == 0:
        return x
    dt = (1.0 - t_start) / steps
    for step in range(steps):
        velocity = predictor.predict_velocity(features, x, cond_shifts, t_start + step * dt)
        x = x + dt * velocity
        if not torch.isfinite(x).all():
            raise DenoiseError(step)
    return x


def denoise_timestep(predictor: FlowPredictor, features: torch.Tensor, cond_shifts: torch.Tensor, steps: int,
                     seed: typing.Optional[int] = None, generator: typing.Optional[torch.Generator] = None,
                     noise: typing.Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Sample normalized shifts for one time step starting from Gaussian noise at t = 0.
    :param seed: seeds a fresh generator when no generator or noise is given
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if noise is None:
        if generator is None:
            generator = torch.Generator().manual_seed(0 if seed is None else seed)
        shape = features.shape[:-1] + (2,)
        noise = torch.randn(shape, generator=generator, dtype=features.dtype)
    return denoise_from(predictor, features, cond_shifts, noise, 0.0, steps)
