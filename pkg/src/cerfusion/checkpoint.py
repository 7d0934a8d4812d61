"""Flat parameter archives: a zip of ``.npy`` entries plus a JSON metadata record.

The layout is readable by ``numpy.load``. Entries are stored uncompressed with
a fixed timestamp so identical parameters produce identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__
from .errors import CheckpointFormatError, ShapeError

METADATA_KEY = "__metadata__"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.array(arr, order="C", copy=True), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, params: dict[str, torch.Tensor], metadata: dict | None = None) -> Path:
    path = Path(path)
    meta = {"toolkit_version": __version__, **(metadata or {})}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(params):
            arr = params[name].detach().cpu().numpy()
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), _npy_bytes(arr))
        blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        zf.writestr(zipfile.ZipInfo(f"{METADATA_KEY}.npy", date_time=_EPOCH), _npy_bytes(blob))
    return path


def save_module(path, module: nn.Module, metadata: dict | None = None) -> Path:
    return save_checkpoint(path, module.state_dict(), metadata)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, OSError, KeyError, EOFError) as exc:
        raise CheckpointFormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    if METADATA_KEY not in arrays:
        raise CheckpointFormatError(f"{path}: missing metadata record")
    try:
        meta = json.loads(arrays.pop(METADATA_KEY).tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt metadata ({exc})") from exc
    return arrays, meta


@dataclass
class LoadReport:
    loaded: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def load_pretrained(module: nn.Module, path, strict: bool = True, prefix: str = "") -> LoadReport:
    """Copy matching parameters from a checkpoint into *module*.

    Names are matched after stripping *prefix* from checkpoint keys. Entries
    that are unknown to the module or have the wrong shape are skipped, and
    module entries absent from the checkpoint are reported as missing; with
    *strict* any of these raises ``ShapeError`` before anything is copied.
    """
    arrays, meta = load_checkpoint(path)
    if prefix:
        arrays = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    state = module.state_dict()
    report = LoadReport(metadata=meta)
    updates = {}
    for name, arr in arrays.items():
        if name not in state or tuple(state[name].shape) != arr.shape:
            report.skipped.append(name)
            continue
        updates[name] = torch.from_numpy(arr.copy()).to(state[name].dtype)
        report.loaded.append(name)
    report.missing = [n for n in state if n not in updates]
    if strict and (report.skipped or report.missing):
        problems = []
        if report.skipped:
            problems.append(f"unexpected or mis-shaped: {', '.join(sorted(report.skipped))}")
        if report.missing:
            problems.append(f"missing: {', '.join(sorted(report.missing))}")
        raise ShapeError(f"{path}: strict load failed; " + "; ".join(problems))
    module.load_state_dict(updates, strict=False)
    return report
