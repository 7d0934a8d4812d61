"""Patch-based transformer encoder with mean-pooled token output."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..errors import ConfigError
from .common import check_finite, init_linear


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    dropout: float = 0.0

    @property
    def output_dim(self) -> int:
        return self.embed_dim

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def validate(self) -> "ViTConfig":
        problems = []
        for name in ("image_size", "patch_size", "embed_dim", "depth", "num_heads"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.patch_size >= 1 and self.image_size % self.patch_size:
            problems.append(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.num_heads >= 1 and self.embed_dim % self.num_heads:
            problems.append(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.mlp_ratio <= 0:
            problems.append("mlp_ratio must be > 0")
        if problems:
            raise ConfigError(problems)
        return self


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)
        self.record_attention = False
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        if self.record_attention:
            self.last_attention = attn.detach()
        out = (self.dropout(attn) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm encoder block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTEncoder(nn.Module):
    kind = "vit"

    def __init__(self, cfg: ViTConfig = ViTConfig()):
        super().__init__()
        self.cfg = cfg.validate()
        self.out_dim = cfg.output_dim
        p = cfg.patch_size
        self.patch_embed = nn.Linear(3 * p * p, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.apply(init_linear)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        """B x 3 x H x W -> B x N x (3*p*p), patches in row-major order."""
        b, c, h, w = x.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible into {p}x{p} patches")
        x = x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def record_attention(self, on: bool = True) -> None:
        for blk in self.blocks:
            blk.attn.record_attention = on

    def attention_maps(self) -> list[torch.Tensor]:
        return [blk.attn.last_attention for blk in self.blocks]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.patchify(x)
        if tokens.shape[1] != self.pos_embed.shape[1]:
            raise ConfigError(
                f"{tokens.shape[1]} patches but positional table holds {self.pos_embed.shape[1]}"
            )
        h = self.patch_embed(tokens) + self.pos_embed
        for blk in self.blocks:
            h = blk(h)
        return check_finite(self.norm(h.mean(dim=1)), "vit")
