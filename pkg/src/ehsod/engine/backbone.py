"""Small residual convnet with a top-down feature pyramid (strides 4-32)."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        return F.relu(x + self.bn2(self.conv2(h)))


def _down(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class Backbone(nn.Module):
    """Four-level pyramid with constant channel width ``width``."""

    min_input_size = 32

    def __init__(self, width: int = 32, stage_channels=(32, 48, 64, 96), blocks_per_stage: int = 1):
        super().__init__()
        c = list(stage_channels)
        self.stem = nn.Sequential(_down(3, c[0] // 2), _down(c[0] // 2, c[0]))
        stages = []
        for i, ch in enumerate(c):
            layers = [] if i == 0 else [_down(c[i - 1], ch)]
            layers += [ResidualBlock(ch) for _ in range(blocks_per_stage)]
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.ModuleList(nn.Conv2d(ch, width, 1) for ch in c)
        self.output = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in c)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        h, w = images.shape[-2:]
        if h < self.min_input_size or w < self.min_input_size:
            raise ValueError(f"input {h}x{w} is smaller than the coarsest stride (32)")
        x = self.stem(images)
        bottom_up = []
        for stage in self.stages:
            x = stage(x)
            bottom_up.append(x)
        top = self.lateral[-1](bottom_up[-1])
        merged = [top]
        for lat, feat in zip(reversed(self.lateral[:-1]), reversed(bottom_up[:-1])):
            top = lat(feat) + F.interpolate(top, size=feat.shape[-2:], mode="nearest")
            merged.append(top)
        merged.reverse()
        return [conv(m) for conv, m in zip(self.output, merged)]


def backbone_forward(image: torch.Tensor, backbone: Backbone) -> list[torch.Tensor]:
    """Feature pyramid for a normalized ``(B, 3, H, W)`` (or ``(3, H, W)``) image."""
    if image.dim() == 3:
        image = image[None]
    return backbone(image)
