"""Procedural image sets for smoke tests and demos.

Each class is a distinct colour + texture pattern; per-image jitter (phase,
noise, brightness) keeps samples from being identical.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import LabelSpace

_COLORS = [
    (220, 40, 40), (40, 180, 60), (50, 80, 220), (230, 200, 40),
    (200, 60, 200), (40, 200, 210), (240, 140, 30), (120, 120, 120),
]


def pattern_image(cls: int, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """An H x W x 3 uint8 image of pattern *cls*."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = rng.uniform(0, 1)
    kind = cls % 8
    if kind == 0:
        tex = (np.sin(2 * np.pi * (4 * yy + phase)) > 0).astype(float)
    elif kind == 1:
        tex = (np.sin(2 * np.pi * (4 * xx + phase)) > 0).astype(float)
    elif kind == 2:
        tex = ((np.floor(4 * xx + phase) + np.floor(4 * yy + phase)) % 2).astype(float)
    elif kind == 3:
        tex = (np.sin(2 * np.pi * (3 * (xx + yy) + phase)) > 0).astype(float)
    elif kind == 4:
        tex = ((np.hypot(xx - 0.5, yy - 0.5) * 8 + phase) % 1 > 0.5).astype(float)
    elif kind == 5:
        tex = yy
    elif kind == 6:
        tex = np.ones_like(xx)
    else:
        tex = ((np.sin(12 * xx + phase) * np.sin(12 * yy)) > 0).astype(float)
    color = np.array(_COLORS[cls % len(_COLORS)], dtype=np.float64)
    img = (0.35 + 0.65 * tex)[..., None] * color * rng.uniform(0.85, 1.0)
    img += rng.normal(0, 6, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def write_pattern_dataset(
    out_dir,
    label_space: LabelSpace,
    per_class: int = 16,
    seed: int = 0,
    size: int = 64,
    manifest_name: str = "manifest.csv",
    image_dir: str = "images",
    source: str | None = None,
) -> Path:
    """Write ``per_class`` PNGs per class and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / image_dir).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for c, name in enumerate(label_space.names):
        for k in range(per_class):
            rel = f"{image_dir}/c{c}_{k:03d}.png"
            Image.fromarray(pattern_image(c, rng, size)).save(out / rel)
            rows.append([rel, name] + ([source] if source else []))
    path = out / manifest_name
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return path


def write_frames(out_dir, n: int, num_classes: int = 7, seed: int = 0, size: int = 64) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        p = out / f"frame_{i:05d}.png"
        Image.fromarray(pattern_image(i % num_classes, rng, size)).save(p)
        paths.append(p)
    return paths
