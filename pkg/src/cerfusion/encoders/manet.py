"""Multi-scale + local-attention network (MANet-style) encoder.

A convolutional stem yields a mid-level feature map. Two branches read it:
one integrates several receptive fields, the other gates spatial regions.
Each branch emits ``branch_dim`` features; the two are scaled by a softmax
over learnable branch weights and concatenated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError
from .common import check_finite, init_linear


def region_grid(regions: int) -> tuple[int, int]:
    """Most square (rows, cols) factorisation of *regions*."""
    rows = max(d for d in range(1, int(math.isqrt(regions)) + 1) if regions % d == 0)
    return rows, regions // rows


@dataclass(frozen=True)
class MANetConfig:
    image_size: int = 224
    stem_channels: int = 64
    stem_stages: int = 2
    branch_dim: int = 512
    scales: tuple[int, ...] = (1, 3, 5, 7)
    attention_regions: int = 4
    gate_hidden: int = 128
    branch_weights: tuple[float, float] = (0.0, 0.0)

    @property
    def output_dim(self) -> int:
        return 2 * self.branch_dim

    @property
    def feature_channels(self) -> int:
        return self.stem_channels * 2**self.stem_stages

    @property
    def feature_size(self) -> int:
        size = self.image_size
        for _ in range(2 + self.stem_stages):
            size = (size + 1) // 2
        return size

    def validate(self) -> "MANetConfig":
        problems = []
        for name in ("image_size", "stem_channels", "branch_dim", "attention_regions", "gate_hidden"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.stem_stages < 0:
            problems.append("stem_stages must be >= 0")
        if not self.scales:
            problems.append("scales must be non-empty")
        elif any(k < 1 or k % 2 == 0 for k in self.scales):
            problems.append(f"scales must be odd kernel sizes >= 1, got {self.scales}")
        if len(self.branch_weights) != 2:
            problems.append("branch_weights needs exactly two values")
        if self.attention_regions >= 1:
            rows, cols = region_grid(self.attention_regions)
            if rows > self.feature_size or cols > self.feature_size:
                problems.append(
                    f"attention_regions {self.attention_regions} ({rows}x{cols}) exceeds the "
                    f"{self.feature_size}x{self.feature_size} feature map"
                )
        if problems:
            raise ConfigError(problems)
        return self


def conv_bn_relu(cin: int, cout: int, k: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class MultiScaleBranch(nn.Module):
    def __init__(self, channels: int, scales, out_dim: int):
        super().__init__()
        self.paths = nn.ModuleList(conv_bn_relu(channels, channels, k) for k in scales)
        self.fuse = nn.Linear(channels * len(scales), out_dim)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        pooled = [path(fmap).mean(dim=(2, 3)) for path in self.paths]
        return self.fuse(torch.cat(pooled, dim=1))


class LocalAttentionBranch(nn.Module):
    """Scores ``regions`` spatial cells with a softmax gate and pools them."""

    def __init__(self, channels: int, regions: int, out_dim: int, hidden: int = 128):
        super().__init__()
        self.grid = region_grid(regions)
        self.score = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.Tanh(),
            nn.Linear(hidden, 1),
        )
        self.proj = nn.Linear(channels, out_dim)
        self.last_gates: torch.Tensor | None = None

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        rows, cols = self.grid
        if rows > fmap.shape[2] or cols > fmap.shape[3]:
            raise ConfigError(
                f"{rows}x{cols} attention regions exceed {fmap.shape[2]}x{fmap.shape[3]} feature map"
            )
        regions = F.adaptive_avg_pool2d(fmap, (rows, cols)).flatten(2).transpose(1, 2)  # B x R x C
        gates = torch.softmax(self.score(regions).squeeze(-1), dim=1)  # B x R
        self.last_gates = gates.detach()
        pooled = (gates.unsqueeze(-1) * regions).sum(dim=1)
        return self.proj(pooled)


class MANetEncoder(nn.Module):
    kind = "manet"

    def __init__(self, cfg: MANetConfig = MANetConfig()):
        super().__init__()
        self.cfg = cfg.validate()
        self.out_dim = cfg.output_dim
        c = cfg.stem_channels
        layers = [conv_bn_relu(3, c, 7, stride=2), nn.MaxPool2d(3, stride=2, padding=1)]
        for _ in range(cfg.stem_stages):
            layers.append(conv_bn_relu(c, 2 * c, 3, stride=2))
            c *= 2
        self.stem = nn.Sequential(*layers)
        self.multi_scale = MultiScaleBranch(c, cfg.scales, cfg.branch_dim)
        self.local_attention = LocalAttentionBranch(
            c, cfg.attention_regions, cfg.branch_dim, cfg.gate_hidden
        )
        self.apply(init_linear)
        self.branch_logits = nn.Parameter(torch.tensor(cfg.branch_weights, dtype=torch.float32))

    def branch_scales(self) -> torch.Tensor:
        return torch.softmax(self.branch_logits, dim=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        fmap = self.stem(x)
        w = self.branch_scales()
        out = torch.cat([w[0] * self.multi_scale(fmap), w[1] * self.local_attention(fmap)], dim=1)
        return check_finite(out, "manet")
