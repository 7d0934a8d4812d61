"""Flat ``key=value`` configuration with defaults < file < environment < flags."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import ConfigError

ENV_PREFIX = "CER_"


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _opt_float(text: str):
    return None if str(text).strip().lower() in ("", "none") else float(text)


def _opt_int(text: str):
    return None if str(text).strip().lower() in ("", "none") else int(text)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "image_size": (int, 224),
    "batch_size": (int, 128),
    "val_fraction": (float, 7067 / 306989),
    "seed": (int, 0),
    "mean": (_floats, (0.485, 0.456, 0.406)),
    "std": (_floats, (0.229, 0.224, 0.225)),
    "flip_prob": (float, 0.5),
    "stratified": (_bool, False),
    "epochs": (int, 100),
    "base_lr": (float, 5e-5),
    "warmup_frac": (float, 0.05),
    "warmup_steps": (_opt_int, None),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "weight_decay": (float, 0.0),
    "grad_clip": (_opt_float, None),
    "freeze_encoders": (_bool, True),
    "hidden_dims": (_ints, (512,)),
    "dropout": (float, 0.3),
    "num_workers": (int, 0),
    "taxonomy": (str, "compound"),
}


def defaults() -> dict[str, Any]:
    return {k: d for k, (_, d) in SCHEMA.items()}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    raw = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            problems.append(f"{origin}:{lineno}: expected key=value, got {line!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    if problems:
        raise ConfigError(problems)
    return raw


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    return {k: environ[ENV_PREFIX + k.upper()] for k in SCHEMA if ENV_PREFIX + k.upper() in environ}


def _coerce(layer: Mapping[str, Any], origin: str, problems: list[str]) -> dict[str, Any]:
    out = {}
    for key, value in layer.items():
        if key not in SCHEMA:
            problems.append(f"{origin}: unknown key {key!r}")
            continue
        if not isinstance(value, str):
            out[key] = value
            continue
        try:
            out[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            problems.append(f"{origin}: bad value for {key!r}: {exc}")
    return out


def resolve(
    config_path=None,
    flags: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> dict[str, Any]:
    """Merge defaults, config file, ``CER_*`` environment variables and flags.

    Flags whose value is ``None`` are treated as unset. All problems across
    layers are collected and raised together.
    """
    problems: list[str] = []
    merged = defaults()
    if config_path is not None:
        try:
            merged.update(_coerce(read_config_file(config_path), str(config_path), problems))
        except ConfigError as exc:
            problems.extend(exc.problems)
    merged.update(_coerce(env_overrides(environ), "environment", problems))
    merged.update(_coerce({k: v for k, v in (flags or {}).items() if v is not None}, "flags", problems))
    problems.extend(validate(merged))
    if problems:
        raise ConfigError(problems)
    return merged


def validate(cfg: Mapping[str, Any]) -> list[str]:
    problems = []
    if cfg["image_size"] < 1:
        problems.append("image_size must be >= 1")
    if cfg["batch_size"] < 1:
        problems.append("batch_size must be >= 1")
    if not 0 <= cfg["val_fraction"] < 1:
        problems.append("val_fraction must be in [0, 1)")
    for key in ("mean", "std"):
        if len(cfg[key]) != 3:
            problems.append(f"{key} needs three comma-separated values")
    if any(s <= 0 for s in cfg["std"]):
        problems.append("std values must be > 0")
    if not 0 <= cfg["flip_prob"] <= 1:
        problems.append("flip_prob must be in [0, 1]")
    if cfg["epochs"] < 1:
        problems.append("epochs must be >= 1")
    if not cfg["base_lr"] > 0:
        problems.append("base_lr must be > 0")
    if not 0 <= cfg["warmup_frac"] <= 1:
        problems.append("warmup_frac must be in [0, 1]")
    if cfg["warmup_steps"] is not None and cfg["warmup_steps"] < 0:
        problems.append("warmup_steps must be >= 0")
    if not 0 <= cfg["dropout"] < 1:
        problems.append("dropout must be in [0, 1)")
    if any(h < 1 for h in cfg["hidden_dims"]):
        problems.append("hidden_dims entries must be >= 1")
    if cfg["taxonomy"] not in ("compound", "single"):
        problems.append(f"taxonomy must be 'compound' or 'single', got {cfg['taxonomy']!r}")
    return problems


def config_hash(cfg: Mapping[str, Any]) -> str:
    blob = json.dumps({k: cfg[k] for k in sorted(cfg)}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:8]
