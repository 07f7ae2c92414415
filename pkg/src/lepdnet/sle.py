"""Stone location embedding and location/image feature fusion."""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError

EMBED_VARIANTS = ("channels", "sequence_mean", "channels_nonorm")


class LocationEmbedding(nn.Module):
    """Embed the 6-component location vector into a c-vector.

    ``channels`` (default) reads the vector as 6 input channels of a length-1
    sequence, so every component has its own weights. ``sequence_mean`` reads
    it as a 1-channel length-6 sequence, applies a kernel-1 convolution and
    averages over the sequence; that reading is symmetric in the six
    components (RK and LK embed identically), so it is kept only for
    comparison. ``channels_nonorm`` drops the batch norm for batch-size-1
    training.
    """

    def __init__(self, channels: int, variant: str = "channels"):
        super().__init__()
        if variant not in EMBED_VARIANTS:
            raise ConfigError(f"sle_embed_variant must be one of {EMBED_VARIANTS}, got {variant!r}")
        self.variant = variant
        in_ch = 1 if variant == "sequence_mean" else 6
        self.conv = nn.Conv1d(in_ch, channels, kernel_size=1, bias=variant == "channels_nonorm")
        self.norm = nn.Identity() if variant == "channels_nonorm" else nn.BatchNorm1d(channels)
        self.act = nn.SiLU()

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() != 2 or y.shape[1] != 6:
            raise ConfigError(f"location batch must be (B, 6), got {tuple(y.shape)}")
        seq = y[:, None, :] if self.variant == "sequence_mean" else y[:, :, None]
        out = self.act(self.norm(self.conv(seq)))
        return out.mean(dim=2)


def broadcast(vec: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """(B, c) -> spatially constant (B, c, h, w)."""
    return vec[:, :, None, None].expand(-1, -1, h, w)


class SLEFusion(nn.Module):
    """Concat(x_ff, y_em) -> 1x1 conv -> BN -> ReLU -> 1x1 conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(2 * channels, channels, 1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 1),
        )

    def forward(self, x_ff: torch.Tensor, y_em: torch.Tensor) -> torch.Tensor:
        if x_ff.shape != y_em.shape:
            raise ConfigError(f"x_ff {tuple(x_ff.shape)} and y_em {tuple(y_em.shape)} must match")
        return self.body(torch.cat([x_ff, y_em], dim=1))


class SLE(nn.Module):
    def __init__(self, channels: int, variant: str = "channels"):
        super().__init__()
        self.embed = LocationEmbedding(channels, variant)
        self.fusion = SLEFusion(channels)

    def embed_location(self, y: torch.Tensor, h: int, w: int) -> torch.Tensor:
        return broadcast(self.embed(y), h, w)

    def forward(self, x_ff: torch.Tensor, y: torch.Tensor | None) -> torch.Tensor:
        """Final feature z; ``y=None`` zeroes the location branch (ablation)."""
        h, w = x_ff.shape[-2:]
        if y is None:
            y_em = torch.zeros_like(x_ff)
        else:
            y_em = self.embed_location(y, h, w)
        return self.fusion(x_ff, y_em)
