"""Confusion matrices, per-class and macro-F1 metrics, and report export.

All rates are percentages. Any precision, recall or F1 whose denominator is
zero is defined as 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, Preprocess, make_batches
from .errors import ShapeError
from .labels import LabelSpace, get_label_space

METRICS_FILE = "metrics.csv"
CONFUSION_FILE = "confusion.csv"
HEATMAP_FILE = "confusion.png"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    label_space: LabelSpace | None = None

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def predicted(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def confusion_matrix(y_true, y_pred, num_classes: int, label_space: LabelSpace | None = None) -> ConfusionMatrix:
    """``counts[i, j]`` = number of samples with true class i predicted as j."""
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ShapeError(f"y_true has {t.size} entries, y_pred has {p.size}")
    for name, arr in (("y_true", t), ("y_pred", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise IndexError(f"{name} contains labels outside [0, {num_classes})")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes), label_space)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def per_class_precision(cm: ConfusionMatrix) -> np.ndarray:
    return 100.0 * _safe_ratio(np.diag(cm.counts), cm.predicted())


def per_class_recall(cm: ConfusionMatrix) -> np.ndarray:
    return 100.0 * _safe_ratio(np.diag(cm.counts), cm.support())


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    p = _safe_ratio(np.diag(cm.counts), cm.predicted())
    r = _safe_ratio(np.diag(cm.counts), cm.support())
    return 100.0 * _safe_ratio(2 * p * r, p + r)


def macro_f1(per_class) -> float:
    """Unweighted mean of per-class F1 scores."""
    values = np.asarray(per_class, dtype=np.float64)
    return float(values.mean()) if values.size else 0.0


def accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    return 100.0 * float(np.trace(cm.counts)) / total if total else 0.0


@dataclass
class EvalReport:
    per_class_recall: np.ndarray
    per_class_precision: np.ndarray
    per_class_f1: np.ndarray
    accuracy: float
    macro_f1: float
    confusion: ConfusionMatrix

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "EvalReport":
        f1 = per_class_f1(cm)
        return cls(per_class_recall(cm), per_class_precision(cm), f1, accuracy(cm), macro_f1(f1), cm)

    @property
    def label_names(self) -> list[str]:
        if self.confusion.label_space is not None:
            return list(self.confusion.label_space.names)
        return [str(i) for i in range(self.confusion.num_classes)]

    def to_dict(self) -> dict:
        space = self.confusion.label_space
        return {
            "taxonomy": space.key if space is not None else None,
            "labels": self.label_names,
            "per_class_recall": self.per_class_recall.tolist(),
            "per_class_precision": self.per_class_precision.tolist(),
            "per_class_f1": self.per_class_f1.tolist(),
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.counts.tolist(),
        }

    def to_json(self) -> str:
        # repr-precision floats, so parsing gives the identical values back
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        space = get_label_space(d["taxonomy"]) if d.get("taxonomy") else None
        cm = ConfusionMatrix(np.asarray(d["confusion"], dtype=np.int64), space)
        return cls(
            np.asarray(d["per_class_recall"], dtype=np.float64),
            np.asarray(d["per_class_precision"], dtype=np.float64),
            np.asarray(d["per_class_f1"], dtype=np.float64),
            float(d["accuracy"]),
            float(d["macro_f1"]),
            cm,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def report_from_predictions(y_true, y_pred, label_space: LabelSpace) -> EvalReport:
    return EvalReport.from_confusion(confusion_matrix(y_true, y_pred, label_space.size, label_space))


def predict_manifest(model, manifest: DatasetManifest, batch_size: int = 128, preprocess: Preprocess = Preprocess(), num_workers: int = 0) -> torch.Tensor:
    """Eval-mode class probabilities for every record, in manifest order."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for batch in make_batches(manifest, batch_size, shuffle=False, preprocess=preprocess, num_workers=num_workers):
                out.append(model.predict_proba(batch.pixels))
    finally:
        model.train(was_training)
    return torch.cat(out)


def evaluate(model, manifest: DatasetManifest, batch_size: int = 128, preprocess: Preprocess = Preprocess(), num_workers: int = 0) -> EvalReport:
    if model.head.num_classes != manifest.label_space.size:
        raise ShapeError(
            f"model predicts {model.head.num_classes} classes but manifest taxonomy "
            f"{manifest.label_space.key!r} has {manifest.label_space.size}"
        )
    probs = predict_manifest(model, manifest, batch_size, preprocess, num_workers)
    y_pred = probs.argmax(dim=1).numpy()
    return report_from_predictions(manifest.labels(), y_pred, manifest.label_space)


def format_metrics_table(report: EvalReport) -> str:
    """``row_name,value`` CSV: per-class recall rows, then ``acc`` and ``F1``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row_name", "value"])
    for name, v in zip(report.label_names, report.per_class_recall):
        w.writerow([name, f"{v:.2f}"])
    w.writerow(["acc", f"{report.accuracy:.2f}"])
    w.writerow(["F1", f"{report.macro_f1:.2f}"])
    return buf.getvalue()


def write_confusion_csv(cm: ConfusionMatrix, path) -> Path:
    names = list(cm.label_space.names) if cm.label_space else [str(i) for i in range(cm.num_classes)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + names)
    for name, row in zip(names, cm.counts):
        w.writerow([name] + [int(v) for v in row])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_confusion_csv(path, label_space: LabelSpace | None = None) -> ConfusionMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
    return ConfusionMatrix(counts, label_space)


def plot_confusion(cm: ConfusionMatrix, path, title: str = "Confusion matrix") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(cm.label_space.names) if cm.label_space else [str(i) for i in range(cm.num_classes)]
    n = cm.num_classes
    fig, ax = plt.subplots(figsize=(1.1 * n + 2.5, 1.0 * n + 2))
    im = ax.imshow(cm.counts, cmap="Blues")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    ax.set_xticks(range(n), labels=names, rotation=45, ha="right")
    ax.set_yticks(range(n), labels=names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    ax.set_title(title)
    threshold = cm.counts.max() / 2 if cm.counts.size else 0
    for i in range(n):
        for j in range(n):
            v = int(cm.counts[i, j])
            ax.text(j, i, str(v), ha="center", va="center", color="white" if v > threshold else "black")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def export_report(report: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / METRICS_FILE
    table.write_text(format_metrics_table(report), encoding="utf-8")
    return [table, write_confusion_csv(report.confusion, out / CONFUSION_FILE), plot_confusion(report.confusion, out / HEATMAP_FILE)]
