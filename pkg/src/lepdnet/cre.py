"""Context-aware region enhancement.

Spatial positions are tokens (n = h*w) and channels the feature dimension
(d = c). Stone-related features query the global features; the raw global
features are added back before a shape-preserving fusion block.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError


def to_tokens(fmap: torch.Tensor) -> torch.Tensor:
    """(B, c, h, w) -> (B, h*w, c)."""
    return fmap.flatten(2).transpose(1, 2)


def from_tokens(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return tokens.transpose(1, 2).reshape(tokens.shape[0], tokens.shape[2], h, w)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic ``softmax(q k^T / sqrt(d))``; works on (n, d) or (B, n, d)."""
    n, d = q.shape[-2], q.shape[-1]
    if n == 0 or d == 0 or k.shape[-2] == 0:
        raise ConfigError(f"attention needs n > 0 and d > 0, got q {tuple(q.shape)}, k {tuple(k.shape)}")
    if k.shape[-1] != d:
        raise ConfigError(f"query dim {d} != key dim {k.shape[-1]}")
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    return torch.softmax(scores, dim=-1)


def scaled_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    if k.shape[-2] != v.shape[-2]:
        raise ConfigError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    return attention_weights(q, k) @ v


class FeatureFusion(nn.Module):
    """1x1 conv -> BN -> ReLU -> 1x1 conv, plus identity residual."""

    def __init__(self, channels: int, bias: bool = True):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 1, bias=bias),
        )

    def forward(self, x):
        return x + self.body(x)


class CRE(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(channels)
        # A shift of the keys/values or of the fused output is a per-channel
        # constant that the batch norm in the location fusion removes, so those
        # biases would never receive gradient.
        self.norm_kv = nn.LayerNorm(channels, bias=False)
        self.fusion = FeatureFusion(channels, bias=False)

    def attend(self, x_seg: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Attention-augmented features: Att(LN(x'), LN(x), LN(x)) + x."""
        if x_seg.shape != x.shape:
            raise ConfigError(f"stone-related features {tuple(x_seg.shape)} do not match global features {tuple(x.shape)}")
        h, w = x.shape[-2:]
        q = self.norm_q(to_tokens(x_seg))
        kv = self.norm_kv(to_tokens(x))
        return from_tokens(scaled_attention(q, kv, kv), h, w) + x

    def forward(self, x_seg: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return self.fusion(self.attend(x_seg, x))
