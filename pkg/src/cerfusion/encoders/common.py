from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..errors import NumericError


@dataclass
class EncoderOutput:
    features: torch.Tensor
    dim: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[1] != self.dim:
            raise ValueError(
                f"features of shape {tuple(self.features.shape)} do not match declared dim {self.dim}"
            )

    @property
    def batch_size(self) -> int:
        return self.features.shape[0]


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if t.is_meta:  # shape-only tracing
        return t
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activations in {where}")
    return t


def init_linear(m: nn.Module) -> None:
    """Truncated-normal(0.02) for linear maps, He fan-out for convolutions."""
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
