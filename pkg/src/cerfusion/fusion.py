"""Feature concatenation, the MLP + softmax head, and prediction output."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .data import ImageBatch
from .encoders import (
    FUSION_ORDER,
    EncoderOutput,
    build_encoder,
    config_from_dict,
    config_to_dict,
)
from .errors import CheckpointFormatError, NumericError, ShapeError
from .labels import LabelSpace, get_label_space

MODEL_KINDS = ("vit", "manet", "resnet", "ensemble")


def concat_features(*outputs: EncoderOutput) -> torch.Tensor:
    """Row-wise concatenation in argument order (ViT, MANet, ResNet)."""
    sizes = {o.batch_size for o in outputs}
    if len(sizes) != 1:
        raise ShapeError(f"encoder outputs disagree on batch size: {[o.batch_size for o in outputs]}")
    return torch.cat([o.features for o in outputs], dim=1)


def softmax(logits):
    """Max-subtracted row softmax. Accepts a tensor or ndarray, returns the same kind."""
    as_numpy = isinstance(logits, np.ndarray)
    z = torch.as_tensor(logits)
    if not torch.isfinite(z).all():
        raise NumericError("softmax received non-finite logits")
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    p = e / e.sum(dim=-1, keepdim=True)
    return p.numpy() if as_numpy else p


class FusionHead(nn.Module):
    """MLP over concatenated features; returns logits (softmax is applied by callers)."""

    def __init__(self, input_dim: int, num_classes: int, hidden_dims: Sequence[int] = (512,), dropout: float = 0.3):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {dropout}")
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.hidden_dims = tuple(hidden_dims)
        self.dropout_rate = dropout
        layers: list[nn.Module] = []
        width = input_dim
        for h in self.hidden_dims:
            layers += [nn.Linear(width, h), nn.GELU(), nn.Dropout(dropout)]
            width = h
        self.hidden = nn.Sequential(*layers)
        self.out = nn.Linear(width, num_classes)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.input_dim:
            raise ShapeError(f"head expects {self.input_dim} features, got {features.shape[-1]}")
        return self.out(self.hidden(features))


class CERClassifier(nn.Module):
    """One or three encoders feeding a :class:`FusionHead`.

    With ``freeze_encoders`` the encoders stay in eval mode and run without
    gradients even while the head trains.
    """

    def __init__(self, encoders: dict[str, nn.Module], head: FusionHead, label_space: LabelSpace, freeze_encoders: bool = True):
        super().__init__()
        kinds = [k for k in FUSION_ORDER if k in encoders]
        if sorted(kinds) != sorted(encoders):
            raise ValueError(f"unknown encoder kinds in {sorted(encoders)}")
        self.encoders = nn.ModuleDict({k: encoders[k] for k in kinds})
        total = sum(e.out_dim for e in self.encoders.values())
        if head.input_dim != total:
            raise ShapeError(f"head input_dim {head.input_dim} != sum of encoder dims {total}")
        if head.num_classes != label_space.size:
            raise ShapeError(f"head has {head.num_classes} classes, taxonomy {label_space.key!r} has {label_space.size}")
        self.head = head
        self.label_space = label_space
        self.freeze_encoders = freeze_encoders
        self.set_frozen(freeze_encoders)

    @property
    def kind(self) -> str:
        return "ensemble" if len(self.encoders) > 1 else next(iter(self.encoders))

    def set_frozen(self, frozen: bool) -> None:
        self.freeze_encoders = frozen
        for p in self.encoders.parameters():
            p.requires_grad_(not frozen)
        self.train(self.training)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze_encoders:
            self.encoders.eval()
        return self

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def encode(self, pixels: torch.Tensor) -> list[EncoderOutput]:
        with torch.set_grad_enabled(torch.is_grad_enabled() and not self.freeze_encoders):
            return [EncoderOutput(enc(pixels), enc.out_dim) for enc in self.encoders.values()]

    def features(self, pixels: torch.Tensor) -> torch.Tensor:
        return concat_features(*self.encode(pixels))

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        logits = self.head(self.features(pixels))
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite logits")
        return logits

    def predict_proba(self, pixels: torch.Tensor) -> torch.Tensor:
        return softmax(self(pixels))

    def metadata(self) -> dict:
        return {
            "model": self.kind,
            "fusion_order": list(self.encoders),
            "encoders": {k: config_to_dict(e.cfg) for k, e in self.encoders.items()},
            "head": {
                "input_dim": self.head.input_dim,
                "num_classes": self.head.num_classes,
                "hidden_dims": list(self.head.hidden_dims),
                "dropout": self.head.dropout_rate,
            },
            "taxonomy": self.label_space.key,
            "label_names": list(self.label_space.names),
            "freeze_encoders": self.freeze_encoders,
        }


def build_classifier(
    model: str,
    encoder_configs: dict,
    label_space: LabelSpace,
    hidden_dims: Sequence[int] = (512,),
    dropout: float = 0.3,
    freeze_encoders: bool = True,
) -> CERClassifier:
    if model not in MODEL_KINDS:
        raise ValueError(f"unknown model {model!r}; expected one of {MODEL_KINDS}")
    kinds = FUSION_ORDER if model == "ensemble" else (model,)
    encoders = {k: build_encoder(k, encoder_configs.get(k)) for k in kinds}
    head = FusionHead(sum(e.out_dim for e in encoders.values()), label_space.size, hidden_dims, dropout)
    return CERClassifier(encoders, head, label_space, freeze_encoders)


def classifier_from_metadata(meta: dict) -> CERClassifier:
    try:
        order = list(meta["fusion_order"])
        if order != [k for k in FUSION_ORDER if k in order]:
            raise CheckpointFormatError(f"fusion order {order} differs from required {list(FUSION_ORDER)}")
        space = get_label_space(meta["taxonomy"])
        if list(meta.get("label_names", space.names)) != list(space.names):
            raise CheckpointFormatError("checkpoint label names do not match the taxonomy")
        configs = {k: config_from_dict(k, meta["encoders"][k]) for k in order}
        head = meta["head"]
        model = "ensemble" if len(order) > 1 else order[0]
        return build_classifier(
            model, configs, space, head["hidden_dims"], head["dropout"], meta.get("freeze_encoders", True)
        )
    except KeyError as exc:
        raise CheckpointFormatError(f"checkpoint metadata lacks {exc}") from exc


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def ensemble_forward(model: CERClassifier, batch: ImageBatch | torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """Probabilities from all attached encoders; dropout only in train mode."""
    _check_mode(mode)
    model.train(mode == "train")
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    if mode == "eval":
        with torch.no_grad():
            return model.predict_proba(pixels)
    return model.predict_proba(pixels)


def single_head_forward(model: CERClassifier, batch, mode: str = "eval") -> torch.Tensor:
    if len(model.encoders) != 1:
        raise ShapeError(f"single-head forward needs one encoder, model has {len(model.encoders)}")
    return ensemble_forward(model, batch, mode)


class Prediction(NamedTuple):
    label_index: int
    label_name: str
    confidence: float


def predict_labels(probs, label_space: LabelSpace) -> list[Prediction]:
    """Row-wise argmax; ties go to the lowest index."""
    p = np.asarray(probs.detach().cpu() if isinstance(probs, torch.Tensor) else probs)
    idx = np.argmax(p, axis=1)
    return [Prediction(int(i), label_space.name(int(i)), float(row[i])) for i, row in zip(idx, p)]


def prediction_header(num_classes: int, first: str = "image_path") -> list[str]:
    return [first, "pred_label", "confidence"] + [f"p_{i}" for i in range(num_classes)]


def format_prediction_row(name: str, probs_row, label_space: LabelSpace) -> list[str]:
    row = np.asarray(probs_row, dtype=np.float64)
    i = int(np.argmax(row))
    return [name, label_space.name(i), f"{row[i]:.6f}"] + [f"{v:.6f}" for v in row]


def write_predictions(path, names: Sequence[str], probs, label_space: LabelSpace, first: str = "image_path") -> Path:
    p = np.asarray(probs.detach().cpu() if isinstance(probs, torch.Tensor) else probs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(prediction_header(label_space.size, first))
    for name, row in zip(names, p):
        w.writerow(format_prediction_row(name, row, label_space))
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path
