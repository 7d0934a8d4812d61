"""Feature extractors and their named presets."""

from __future__ import annotations

import dataclasses

import torch
from torch import nn

from ..data import ImageBatch
from .common import EncoderOutput, check_finite
from .manet import LocalAttentionBranch, MANetConfig, MANetEncoder, MultiScaleBranch
from .resnet import Bottleneck, ResNetConfig, ResNetEncoder
from .vit import TransformerBlock, ViTConfig, ViTEncoder

ENCODER_KINDS = ("vit", "manet", "resnet")
FUSION_ORDER = ENCODER_KINDS

_CLASSES = {"vit": (ViTConfig, ViTEncoder), "manet": (MANetConfig, MANetEncoder), "resnet": (ResNetConfig, ResNetEncoder)}

PRESETS = {
    "vit-full": ViTConfig(),
    "manet-full": MANetConfig(),
    "resnet-full": ResNetConfig(),
    "vit-toy": ViTConfig(patch_size=56, embed_dim=32, depth=1, num_heads=2, mlp_ratio=2.0),
    "manet-toy": MANetConfig(stem_channels=4, stem_stages=2, branch_dim=16, scales=(1, 3), attention_regions=4, gate_hidden=16),
    "resnet-toy": ResNetConfig(stage_blocks=(1, 1, 1, 1), base_width=8, projection_dim=16),
}


def preset_config(kind: str, scale: str):
    try:
        return PRESETS[f"{kind}-{scale}"]
    except KeyError:
        raise ValueError(f"no preset {kind}-{scale}") from None


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(kind: str, data: dict):
    cls = _CLASSES[kind][0]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items() if k in fields}
    return cls(**kwargs)


def build_encoder(kind: str, cfg=None) -> nn.Module:
    if kind not in _CLASSES:
        raise ValueError(f"unknown encoder {kind!r}; expected one of {ENCODER_KINDS}")
    cfg_cls, enc_cls = _CLASSES[kind]
    return enc_cls(cfg if cfg is not None else cfg_cls())


def encode(encoder: nn.Module, batch: ImageBatch | torch.Tensor) -> EncoderOutput:
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    return EncoderOutput(encoder(pixels), encoder.out_dim)


def vit_forward(encoder: ViTEncoder, batch) -> EncoderOutput:
    return encode(encoder, batch)


def manet_forward(encoder: MANetEncoder, batch) -> EncoderOutput:
    return encode(encoder, batch)


def resnet_forward(encoder: ResNetEncoder, batch) -> EncoderOutput:
    return encode(encoder, batch)


__all__ = [
    "Bottleneck", "ENCODER_KINDS", "EncoderOutput", "FUSION_ORDER", "LocalAttentionBranch",
    "MANetConfig", "MANetEncoder", "MultiScaleBranch", "PRESETS", "ResNetConfig", "ResNetEncoder",
    "TransformerBlock", "ViTConfig", "ViTEncoder", "build_encoder", "check_finite", "config_from_dict",
    "config_to_dict", "encode", "manet_forward", "preset_config", "resnet_forward", "vit_forward",
]
