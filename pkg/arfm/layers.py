"""
Numeric substrate of the models: shape-checked linear maps, layer norm,
masked scaled-dot-product attention with a per-layer key/value cache and
the positional embeddings shared by the fusion, flow and encoder networks.
"""
from __future__ import annotations

import logging
import math
import typing

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

MASK_MODES = ("none", "causal")
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class CacheError(RuntimeError):
    pass


def linear_forward(x: torch.Tensor, weight: torch.Tensor, bias: typing.Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Affine map over the last axis.
    :param x: input of shape (..., in_features)
    :param weight: matrix of shape (out_features, in_features)
    :param bias: optional vector of shape (out_features,)
    :return: tensor of shape (..., out_features)
    """
    if weight.dim() != 2 or x.dim() == 0 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input with {tuple(x.shape)} does not fit weight {tuple(weight.shape)}")
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError(f"linear: bias {tuple(bias.shape)} does not fit weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, shift: torch.Tensor, eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    """
    Normalize over the last axis with biased variance, then scale and shift.
    """
    channels = x.shape[-1]
    if tuple(gain.shape) != (channels,) or tuple(shift.shape) != (channels,):
        raise ShapeError(f"layer_norm: gain/shift must have shape ({channels},)")
    return F.layer_norm(x, (channels,), gain, shift, eps)


class AttentionCache(object):
    """
    Keys and values of already committed time steps, one entry per temporal
    attention layer. New entries are staged by `read` and only become part of
    the cache on `commit`, so re-running an uncommitted step is idempotent.
    """

    def __init__(self, num_layers: int) -> None:
        self.num_layers = num_layers
        self.keys: list = [None] * num_layers
        self.values: list = [None] * num_layers
        self.seen_steps = 0
        self.__pending = {}
        self.__pending_steps = None

    def __repr__(self) -> str:
        return f"<AttentionCache (layers: {self.num_layers}, seen_steps: {self.seen_steps})>"

    def read(self, layer: int, keys: torch.Tensor, values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Stage keys/values of the uncommitted steps of one layer.
        :return: committed plus staged keys and values, in time order
        """
        if not 0 <= layer < self.num_layers:
            raise CacheError(f"layer {layer} outside of cache with {self.num_layers} layers")
        steps = keys.shape[-2]
        if self.__pending_steps is not None and steps != self.__pending_steps:
            raise CacheError(f"layer {layer} stages {steps} steps, other layers staged {self.__pending_steps}")
        self.__pending_steps = steps
        self.__pending[layer] = (keys.detach(), values.detach())
        if self.keys[layer] is None:
            return keys, values
        if self.keys[layer].shape[:-2] != keys.shape[:-2]:
            raise CacheError(f"cached keys {tuple(self.keys[layer].shape)} do not match {tuple(keys.shape)}")
        return torch.cat([self.keys[layer], keys], dim=-2), torch.cat([self.values[layer], values], dim=-2)

    def commit(self) -> None:
        if len(self.__pending) != self.num_layers:
            raise CacheError(f"commit with {len(self.__pending)} of {self.num_layers} layers staged")
        for layer, (keys, values) in self.__pending.items():
            if self.keys[layer] is None:
                self.keys[layer], self.values[layer] = keys, values
            else:
                self.keys[layer] = torch.cat([self.keys[layer], keys], dim=-2)
                self.values[layer] = torch.cat([self.values[layer], values], dim=-2)
        self.seen_steps += self.__pending_steps
        self.discard()

    def discard(self) -> None:
        self.__pending = {}
        self.__pending_steps = None

    def fork(self) -> AttentionCache:
        """ Copy of the committed state; staged entries are not carried over. """
        forked = AttentionCache(self.num_layers)
        forked.keys = list(self.keys)
        forked.values = list(self.values)
        forked.seen_steps = self.seen_steps
        return forked


def attention_forward(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask_mode: str = "none",
                      cache: typing.Optional[AttentionCache] = None, layer: int = 0,
                      return_weights: bool = False):
    """
    softmax(q k^T / sqrt(d)) v over the second to last axis.
    :param mask_mode: "none" or "causal"; causal positions are offset by the steps already in `cache`
    :param cache: when given, `k` and `v` hold only the new steps and are staged into the cache
    :param return_weights: also return the attention weights
    """
    assert mask_mode in MASK_MODES, f"mask_mode must be one of {MASK_MODES}"
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    offset = 0
    if cache is not None:
        if q.shape[-2] != k.shape[-2]:
            raise CacheError("cached attention expects queries for the new steps only")
        offset = cache.seen_steps
        k, v = cache.read(layer, k, v)
    scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if mask_mode == "causal":
        query_pos = torch.arange(q.shape[-2], device=q.device) + offset
        key_pos = torch.arange(k.shape[-2], device=q.device)
        scores = scores.masked_fill(key_pos[None, :] > query_pos[:, None], float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = torch.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def fourier_embed(positions: torch.Tensor, num_bands: int, canvas: float = 256.0) -> torch.Tensor:
    """
    Multi-frequency sin/cos features of pixel positions.
    :param positions: tensor of shape (..., 2)
    :return: tensor of shape (..., 4 * num_bands)
    """
    assert num_bands >= 1, "num_bands must be positive"
    if positions.shape[-1] != 2:
        raise ShapeError(f"fourier_embed expects (..., 2), got {tuple(positions.shape)}")
    freqs = math.pi * 2.0 ** torch.arange(num_bands, dtype=positions.dtype, device=positions.device)
    angles = (positions / canvas)[..., None] * freqs
    angles = angles.flatten(-2)
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def sinusoidal_embed(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """
    Transformer-style embedding of flow times t in [0, 1].
    :return: tensor of shape (*t.shape, dim)
    """
    dtype = t.dtype if t.is_floating_point() else torch.float32
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype, device=t.device) / half)
    args = (t.to(dtype) * 1000.0)[..., None] * freqs
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = torch.cat([embedding, torch.zeros_like(embedding[..., :1])], dim=-1)
    return embedding


class Linear(nn.Linear):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear_forward(x, self.weight, self.bias)


class LayerNorm(nn.LayerNorm):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int) -> None:
        super().__init__()
        assert width % heads == 0, f"heads ({heads}) must divide width ({width})"
        self.heads = heads
        self.qkv = Linear(width, 3 * width)
        self.proj = Linear(width, width)

    def forward(self, x: torch.Tensor, mask_mode: str = "none", cache: typing.Optional[AttentionCache] = None,
                layer: int = 0) -> torch.Tensor:
        batch, steps, width = x.shape
        q, k, v = self.qkv(x).view(batch, steps, 3, self.heads, width // self.heads).permute(2, 0, 3, 1, 4)
        out = attention_forward(q, k, v, mask_mode=mask_mode, cache=cache, layer=layer)
        return self.proj(out.transpose(1, 2).reshape(batch, steps, width))


class TransformerBlock(nn.Module):
    """ Pre-norm attention block with a GELU MLP. """

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4) -> None:
        super().__init__()
        self.norm1 = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads)
        self.norm2 = LayerNorm(width)
        self.mlp = nn.Sequential(Linear(width, mlp_ratio * width), nn.GELU(), Linear(mlp_ratio * width, width))

    def forward(self, x: torch.Tensor, mask_mode: str = "none", cache: typing.Optional[AttentionCache] = None,
                layer: int = 0) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), mask_mode=mask_mode, cache=cache, layer=layer)
        return x + self.mlp(self.norm2(x))
