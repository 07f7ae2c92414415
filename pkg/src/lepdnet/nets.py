"""Global-feature backbone and coarse segmentation network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

BACKBONES = ("tiny", "resnet18_style")
LATENT_TAPS = ("bottleneck", "decoder")


@dataclass
class NetConfig:
    backbone: str = "tiny"
    input_size: int = 64
    seed: int = 0
    latent_tap: str = "bottleneck"
    sle_embed_variant: str = "channels"
    weights_path: str | None = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.latent_tap not in LATENT_TAPS:
            raise ConfigError(f"latent_tap must be one of {LATENT_TAPS}, got {self.latent_tap!r}")
        stride = 8 if self.backbone == "tiny" else 32
        if self.input_size % stride:
            raise ConfigError(f"input_size {self.input_size} not divisible by backbone stride {stride}")

    @property
    def channels(self) -> int:
        return 64 if self.backbone == "tiny" else 512

    @property
    def feature_size(self) -> int:
        return self.input_size // (8 if self.backbone == "tiny" else 32)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return self.channels, self.feature_size, self.feature_size

    def to_dict(self) -> dict:
        return asdict(self)


def conv_bn_relu(cin: int, cout: int, k: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class TinyBackbone(nn.Module):
    """Three [conv3x3, BN, ReLU, 2x2 max-pool] stages, widths 16/32/64."""

    def __init__(self, in_ch: int = 1, widths=(16, 32, 64)):
        super().__init__()
        layers, cin = [], in_ch
        for w in widths:
            layers += [conv_bn_relu(cin, w), nn.MaxPool2d(2)]
            cin = w
        self.features = nn.Sequential(*layers)
        self.out_channels = cin

    def forward(self, x):
        return self.features(x)


class ResNet18Backbone(nn.Module):
    """torchvision ResNet-18 trunk on one input channel, truncated after layer4."""

    def __init__(self, in_ch: int = 1):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        net.conv1 = nn.Conv2d(in_ch, 64, 7, stride=2, padding=3, bias=False)
        self.features = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                      net.layer1, net.layer2, net.layer3, net.layer4)
        self.out_channels = 512

    def forward(self, x):
        return self.features(x)


class SegNet(nn.Module):
    """Three-level encoder-decoder with skip connections.

    Returns the stone-related latent (tapped feature projected to ``out_channels``
    and resized to ``latent_size``) and full-resolution segmentation logits.
    """

    def __init__(self, out_channels: int, latent_size: int, widths=(16, 32, 64), in_ch: int = 1,
                 latent_tap: str = "bottleneck"):
        super().__init__()
        w1, w2, w3 = widths
        self.enc1 = conv_bn_relu(in_ch, w1)
        self.enc2 = conv_bn_relu(w1, w2)
        self.enc3 = conv_bn_relu(w2, w3)
        self.bottleneck = conv_bn_relu(w3, w3)
        self.dec3 = conv_bn_relu(w3 + w3, w2)
        self.dec2 = conv_bn_relu(w2 + w2, w1)
        self.dec1 = conv_bn_relu(w1 + w1, w1)
        self.head = nn.Conv2d(w1, 1, 1)
        self.latent_tap = latent_tap
        tap_ch = w3 if latent_tap == "bottleneck" else w2
        self.project = nn.Conv2d(tap_ch, out_channels, 1)
        self.latent_size = latent_size

    @staticmethod
    def _up(x, ref):
        # nearest: bilinear backward is several times slower in channels_last on CPU
        return F.interpolate(x, size=ref.shape[-2:], mode="nearest")

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        b = self.bottleneck(F.max_pool2d(e3, 2))
        d3 = self.dec3(torch.cat([self._up(b, e3), e3], 1))
        d2 = self.dec2(torch.cat([self._up(d3, e2), e2], 1))
        d1 = self.dec1(torch.cat([self._up(d2, e1), e1], 1))
        logits = self.head(d1)
        tap = b if self.latent_tap == "bottleneck" else d3
        latent = self.project(tap)
        if latent.shape[-1] != self.latent_size:
            latent = F.interpolate(latent, size=(self.latent_size, self.latent_size),
                                   mode="bilinear", align_corners=False)
        return latent, logits


def build_backbone(cfg: NetConfig) -> nn.Module:
    return TinyBackbone() if cfg.backbone == "tiny" else ResNet18Backbone()


def build_segnet(cfg: NetConfig) -> SegNet:
    widths = (4, 8, 16) if cfg.backbone == "tiny" else (32, 64, 128)
    return SegNet(cfg.channels, cfg.feature_size, widths, latent_tap=cfg.latent_tap)


def check_input(images: torch.Tensor, cfg: NetConfig) -> None:
    if images.dim() != 4 or images.shape[1] != 1 or tuple(images.shape[-2:]) != (cfg.input_size,) * 2:
        raise ConfigError(
            f"expected images of shape (B, 1, {cfg.input_size}, {cfg.input_size}), got {tuple(images.shape)}"
        )
