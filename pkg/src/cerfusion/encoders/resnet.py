"""Bottleneck residual CNN with a linear projection head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..errors import ConfigError
from .common import check_finite, init_linear

EXPANSION = 4


@dataclass(frozen=True)
class ResNetConfig:
    stage_blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    base_width: int = 64
    projection_dim: int = 512

    @property
    def backbone_dim(self) -> int:
        return self.base_width * 8 * EXPANSION

    @property
    def output_dim(self) -> int:
        return self.projection_dim

    def validate(self) -> "ResNetConfig":
        problems = []
        if len(self.stage_blocks) != 4 or any(n < 1 for n in self.stage_blocks):
            problems.append(f"stage_blocks must be four counts >= 1, got {self.stage_blocks}")
        if self.base_width < 1:
            problems.append("base_width must be >= 1")
        if self.projection_dim < 1:
            problems.append("projection_dim must be >= 1")
        if problems:
            raise ConfigError(problems)
        return self


class Bottleneck(nn.Module):
    def __init__(self, in_channels: int, mid_channels: int, stride: int = 1):
        super().__init__()
        out_channels = mid_channels * EXPANSION
        self.conv1 = nn.Conv2d(in_channels, mid_channels, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_channels)
        self.conv2 = nn.Conv2d(mid_channels, mid_channels, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid_channels)
        self.conv3 = nn.Conv2d(mid_channels, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU()
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class ResNetEncoder(nn.Module):
    kind = "resnet"

    def __init__(self, cfg: ResNetConfig = ResNetConfig()):
        super().__init__()
        self.cfg = cfg.validate()
        self.out_dim = cfg.output_dim
        w = cfg.base_width
        self.stem = nn.Sequential(
            nn.Conv2d(3, w, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        in_ch = w
        for i, n in enumerate(cfg.stage_blocks):
            mid = w * 2**i
            blocks = [Bottleneck(in_ch, mid, stride=1 if i == 0 else 2)]
            in_ch = mid * EXPANSION
            blocks += [Bottleneck(in_ch, mid) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.projection = nn.Linear(cfg.backbone_dim, cfg.projection_dim)
        self.apply(init_linear)
        for m in self.modules():
            if isinstance(m, Bottleneck):
                nn.init.zeros_(m.bn3.weight)

    def backbone(self, x: torch.Tensor) -> torch.Tensor:
        """Globally pooled final-stage features, B x backbone_dim."""
        return self.stages(self.stem(x)).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return check_finite(self.projection(self.backbone(x)), "resnet")
