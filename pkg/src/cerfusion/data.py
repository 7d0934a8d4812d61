"""Manifest ingestion, the Unity merge, image preprocessing and batching."""

from __future__ import annotations

import csv
import io
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ImageLoadError, ManifestError
from .labels import LabelSpace

SPLITS = ("train", "val", "test")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MANIFEST_HEADER = ("image_path", "label_name", "source")
_HEADER_PATH_TOKENS = {"image_path", "relative_image_path", "path", "relative_path"}


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    label_index: int
    source: str = ""

    def __post_init__(self):
        if not self.image_path:
            raise ManifestError("empty image path")
        if self.label_index < 0:
            raise ManifestError(f"negative label index for {self.image_path}")


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    split: str
    label_space: LabelSpace

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        for rec in self.records:
            if rec.label_index >= self.label_space.size:
                raise ManifestError(
                    f"label index {rec.label_index} invalid for taxonomy {self.label_space.key!r}"
                )

    def __len__(self):
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label_index for r in self.records], dtype=np.int64)


@dataclass(frozen=True)
class Preprocess:
    image_size: int = 224
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


@dataclass
class ImageBatch:
    pixels: torch.Tensor
    labels: torch.Tensor | None = None
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W pixels, got {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] < 1:
            raise ValueError("empty batch")
        if self.labels is not None and self.labels.shape != (self.pixels.shape[0],):
            raise ValueError("labels must have one entry per image")

    def __len__(self):
        return self.pixels.shape[0]


def _is_comment(row: list[str]) -> bool:
    return not row or not "".join(row).strip() or row[0].lstrip().startswith("#")


def load_manifest(path, label_space: LabelSpace, split: str = "train") -> DatasetManifest:
    """Read a ``relative_path,label_name[,source]`` CSV.

    Relative paths are resolved against the manifest's directory, so records
    always carry usable paths regardless of the caller's working directory.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    root = os.path.abspath(path.parent)
    default_source = path.stem
    records = []
    seen_data = False
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if _is_comment(row):
            continue
        row = [c.strip() for c in row]
        if not seen_data and row[0].lower() in _HEADER_PATH_TOKENS:
            seen_data = True
            continue
        seen_data = True
        if len(row) not in (2, 3) or not row[0]:
            raise ManifestError(f"{path}: malformed row at line {lineno}: {row!r}")
        rel, name = row[0], row[1]
        if name not in label_space:
            raise ManifestError(f"unknown label '{name}' at line {lineno} of {path}")
        source = row[2] if len(row) == 3 and row[2] else default_source
        records.append(
            SampleRecord(os.path.normpath(os.path.join(root, rel)), label_space.index(name), source)
        )
    if not records:
        raise ManifestError(f"{path}: manifest has no records")
    return DatasetManifest(records, split, label_space)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    """Write *manifest* with paths relative to the output file's directory."""
    path = Path(path)
    root = os.path.abspath(path.parent)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for rec in manifest.records:
        rel = os.path.relpath(rec.image_path, root).replace(os.sep, "/")
        writer.writerow([rel, manifest.label_space.name(rec.label_index), rec.source])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def merge_unity(
    manifests: Sequence[DatasetManifest],
    val_fraction: float,
    seed: int,
    stratified: bool = False,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Pool single-expression manifests and carve out a validation split.

    ``round(N * val_fraction)`` records go to val after a seeded shuffle. With
    ``stratified`` the rounding is applied per class instead, so the val count
    can differ from the plain rule by at most the number of classes.
    """
    if not manifests:
        raise ManifestError("merge needs at least one manifest")
    space = manifests[0].label_space
    for m in manifests[1:]:
        if m.label_space != space:
            raise ManifestError(
                f"mixed label spaces: {space.key!r} vs {m.label_space.key!r}"
            )
    if not 0.0 <= val_fraction < 1.0:
        raise ManifestError(f"val_fraction must be in [0, 1), got {val_fraction}")

    pooled = [rec for m in manifests for rec in m.records]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pooled))

    if stratified:
        val_idx = []
        labels = np.array([pooled[i].label_index for i in order])
        for c in range(space.size):
            members = order[labels == c]
            val_idx.extend(members[: _round_half_up(len(members) * val_fraction)].tolist())
        val_set = set(val_idx)
        val_order = [i for i in order if i in val_set]
        train_order = [i for i in order if i not in val_set]
    else:
        n_val = _round_half_up(len(pooled) * val_fraction)
        val_order, train_order = order[:n_val], order[n_val:]

    train = DatasetManifest([pooled[i] for i in train_order], "train", space)
    val = DatasetManifest([pooled[i] for i in val_order], "val", space)
    return train, val


def read_image(path, size: int = 224) -> np.ndarray:
    """Decode to RGB, bilinear-resize to size x size, scale to [0, 1]; returns 3 x H x W."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError, Image.DecompressionBombError) as exc:
        raise ImageLoadError(path, exc) from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / np.float32(255.0)


def normalize(pixels: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
    return (pixels - mean) / std


def load_image(record: SampleRecord | str, preprocess: Preprocess = Preprocess()) -> torch.Tensor:
    path = record.image_path if isinstance(record, SampleRecord) else record
    unit = read_image(path, preprocess.image_size)
    return torch.from_numpy(normalize(unit, preprocess.mean, preprocess.std))


def augment(batch: ImageBatch, rng: np.random.Generator, flip_prob: float = 0.5) -> ImageBatch:
    """Flip each image horizontally with probability *flip_prob*."""
    flips = rng.random(len(batch)) < flip_prob
    if not flips.any():
        return replace(batch, pixels=batch.pixels.clone())
    pixels = batch.pixels.clone()
    mask = torch.from_numpy(flips)
    pixels[mask] = torch.flip(batch.pixels[mask], dims=(3,))
    return replace(batch, pixels=pixels)


def batch_order(n: int, shuffle: bool, seed: int) -> np.ndarray:
    if shuffle:
        return np.random.default_rng(seed).permutation(n)
    return np.arange(n)


def make_batches(
    manifest: DatasetManifest,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    preprocess: Preprocess = Preprocess(),
    num_workers: int = 0,
) -> Iterator[ImageBatch]:
    """Yield batches covering each record exactly once.

    Worker threads only prefetch decoded images; emission order is always the
    manifest order (or its seeded permutation).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = batch_order(len(manifest.records), shuffle, seed)
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]

    def build(idx) -> ImageBatch:
        recs = [manifest.records[i] for i in idx]
        pixels = torch.stack([load_image(r, preprocess) for r in recs])
        labels = torch.tensor([r.label_index for r in recs], dtype=torch.long)
        return ImageBatch(pixels, labels, [r.image_path for r in recs])

    if num_workers <= 0:
        for idx in chunks:
            yield build(idx)
        return
    depth = 2 * num_workers
    with ThreadPoolExecutor(max_workers=num_workers) as pool:
        pending = deque(pool.submit(build, idx) for idx in chunks[:depth])
        for idx in chunks[depth:]:
            yield pending.popleft().result()
            pending.append(pool.submit(build, idx))
        while pending:
            yield pending.popleft().result()
