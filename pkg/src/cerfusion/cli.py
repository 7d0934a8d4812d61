"""Command-line interface: ``cerfusion {merge-datasets,train,evaluate,predict}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import re
import sys
import time
from pathlib import Path

import torch

from . import data as data_mod
from .config import config_hash, resolve
from .encoders import ENCODER_KINDS, preset_config
from .errors import CERError, ConfigError, ImageLoadError, ManifestError
from .evaluation import evaluate, export_report, format_metrics_table
from .fusion import MODEL_KINDS, build_classifier, format_prediction_row, prediction_header, softmax
from .labels import COMPOUND, SINGLE, get_label_space
from .training import (
    TrainConfig,
    fit,
    load_classifier,
    preprocess_from_metadata,
    seed_everything,
)
from .checkpoint import load_checkpoint, load_pretrained

log = logging.getLogger("cerfusion")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}
MERGE_OUTPUTS = ("train.csv", "val.csv", "merge.json")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def natural_key(name: str):
    return [(0, int(tok), tok) if tok.isdigit() else (1, 0, tok) for tok in re.split(r"(\d+)", name) if tok]


def list_frames(frames_dir) -> list[Path]:
    d = Path(frames_dir)
    if not d.is_dir():
        raise ConfigError(f"frames directory not found: {d}")
    frames = [p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    if not frames:
        raise ConfigError(f"no image files in {d}")
    return sorted(frames, key=lambda p: natural_key(p.name))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_dir(args, settings: dict) -> Path:
    if args.out:
        return Path(args.out)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{stamp}-{args.command}-{config_hash(settings)}"


def _settings(args, **flags) -> dict:
    return resolve(args.config, {"seed": args.seed, **flags})


def _setup(args, settings) -> None:
    seed_everything(settings["seed"], deterministic=args.deterministic)
    if args.deterministic:
        torch.set_num_threads(1)


def _preprocess(settings) -> data_mod.Preprocess:
    return data_mod.Preprocess(settings["image_size"], tuple(settings["mean"]), tuple(settings["std"]))


def cmd_merge_datasets(args) -> int:
    settings = _settings(args, val_fraction=args.val_fraction, stratified=args.stratified or None)
    out = _run_dir(args, settings)
    existing = [n for n in MERGE_OUTPUTS if (out / n).exists()]
    if existing and not args.force:
        raise CERError(f"refusing to overwrite {', '.join(existing)} in {out} (use --force)")
    manifests = [data_mod.load_manifest(p, SINGLE, "train") for p in args.inputs]
    train, val = data_mod.merge_unity(manifests, settings["val_fraction"], settings["seed"], settings["stratified"])
    out.mkdir(parents=True, exist_ok=True)
    data_mod.write_manifest(train, out / "train.csv")
    data_mod.write_manifest(val, out / "val.csv")
    provenance = {
        "inputs": [{"path": str(p), "sha256": _sha256(p), "records": len(m)} for p, m in zip(args.inputs, manifests)],
        "seed": settings["seed"],
        "val_fraction": settings["val_fraction"],
        "stratified": settings["stratified"],
        "counts": {"train": len(train), "val": len(val)},
    }
    (out / "merge.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"train: {len(train)}  val: {len(val)}  -> {out}")
    return 0


def _parse_pretrained(specs) -> dict[str, str]:
    out = {}
    for spec in specs or []:
        kind, sep, path = spec.partition("=")
        if not sep or kind not in ENCODER_KINDS:
            raise ConfigError(f"--pretrained expects KIND=PATH with KIND in {ENCODER_KINDS}, got {spec!r}")
        out[kind] = path
    return out


def cmd_train(args) -> int:
    settings = _settings(
        args,
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_lr=args.lr,
        warmup_frac=args.warmup_frac,
        freeze_encoders=args.freeze_encoders,
        taxonomy=args.taxonomy,
    )
    pretrained = _parse_pretrained(args.pretrained)
    _setup(args, settings)
    space = get_label_space(settings["taxonomy"])
    train_m = data_mod.load_manifest(args.train, space, "train")
    val_m = data_mod.load_manifest(args.val, space, "val") if args.val else train_m
    out = _run_dir(args, settings)
    configs = {k: preset_config(k, args.preset) for k in ENCODER_KINDS}
    model = build_classifier(
        args.model, configs, space, settings["hidden_dims"], settings["dropout"], settings["freeze_encoders"]
    )
    for kind, path in pretrained.items():
        if kind not in model.encoders:
            raise ConfigError(f"--pretrained {kind}=... but model {args.model!r} has no {kind} encoder")
        arrays, _ = load_checkpoint(path)
        prefix = f"encoders.{kind}." if any(k.startswith(f"encoders.{kind}.") for k in arrays) else ""
        report = load_pretrained(model.encoders[kind], path, strict=False, prefix=prefix)
        print(f"{kind}: loaded {len(report.loaded)} tensors, skipped {len(report.skipped)}, missing {len(report.missing)}")
    cfg = TrainConfig(
        epochs=settings["epochs"],
        batch_size=settings["batch_size"],
        base_lr=settings["base_lr"],
        warmup_steps=settings["warmup_steps"],
        warmup_frac=settings["warmup_frac"],
        betas=(settings["adam_beta1"], settings["adam_beta2"]),
        eps=settings["adam_eps"],
        weight_decay=settings["weight_decay"],
        grad_clip=settings["grad_clip"],
        seed=settings["seed"],
        freeze_encoders=settings["freeze_encoders"],
        flip_prob=settings["flip_prob"],
        num_workers=settings["num_workers"],
        preprocess=_preprocess(settings),
    )

    def progress(row):
        print(
            f"epoch {row['epoch']:>4d}/{cfg.epochs}  loss {row['loss']:.4f}  "
            f"val_acc {row['val_acc']:6.2f}  val_f1 {row['val_f1']:6.2f}  lr {row['lr']:.3g}",
            flush=True,
        )

    result = fit(model, train_m, val_m, cfg, out, progress)
    print(f"best checkpoint: {result.best_checkpoint}")
    return 0


def _load_manifest_for(path, space) -> data_mod.DatasetManifest:
    try:
        return data_mod.load_manifest(path, space, "val")
    except ManifestError as first:
        for other in (COMPOUND, SINGLE):
            if other is space:
                continue
            try:
                data_mod.load_manifest(path, other, "val")
            except ManifestError:
                continue
            raise ConfigError(
                f"checkpoint taxonomy {space.key!r} ({space.size} classes) does not match "
                f"manifest taxonomy {other.key!r} ({other.size} classes)"
            ) from None
        raise first


def cmd_evaluate(args) -> int:
    settings = _settings(args, batch_size=args.batch_size)
    _setup(args, settings)
    model, meta = load_classifier(args.checkpoint)
    manifest = _load_manifest_for(args.manifest, model.label_space)
    report = evaluate(model, manifest, settings["batch_size"], preprocess_from_metadata(meta))
    out = _run_dir(args, settings)
    files = export_report(report, out)
    print(format_metrics_table(report), end="")
    for f in files:
        print(f"wrote {f}")
    return 0


def cmd_predict(args) -> int:
    settings = _settings(args, batch_size=args.batch_size)
    _setup(args, settings)
    frames = list_frames(args.frames)
    model, meta = load_classifier(args.checkpoint)
    prep = preprocess_from_metadata(meta)
    space = model.label_space

    out_csv = Path(args.out_csv) if args.out_csv else _run_dir(args, settings) / "predictions.csv"
    out_csv.parent.mkdir(parents=True, exist_ok=True)

    rows: dict[int, list[str]] = {}
    pending: list[tuple[int, torch.Tensor]] = []

    def flush():
        if not pending:
            return
        with torch.no_grad():
            probs = softmax(model(torch.stack([t for _, t in pending]))).numpy()
        for (i, _), p in zip(pending, probs):
            rows[i] = format_prediction_row(frames[i].name, p, space)
        pending.clear()

    for i, frame in enumerate(frames):
        try:
            pending.append((i, data_mod.load_image(str(frame), prep)))
        except ImageLoadError as exc:
            if args.strict:
                raise
            log.warning("%s", exc)
            rows[i] = [frame.name, "ERROR", ""] + [""] * space.size
        if len(pending) >= settings["batch_size"]:
            flush()
    flush()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(prediction_header(space.size, first="frame"))
    for i in range(len(frames)):
        w.writerow(rows[i])
    out_csv.write_text(buf.getvalue(), encoding="utf-8")
    print(f"wrote {len(frames)} predictions to {out_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory (default: runs/<timestamp>-<command>-<config hash>)")
    common.add_argument("--preset", choices=("toy", "full"), default="full")
    common.add_argument("--deterministic", action="store_true", help="deterministic kernels, single thread")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cerfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("merge-datasets", parents=[common], help="merge single-expression manifests into train/val")
    p.add_argument("inputs", nargs="+", help="manifest CSVs over the 8-class single taxonomy")
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--stratified", action="store_true")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(func=cmd_merge_datasets)

    p = sub.add_parser("train", parents=[common], help="train a single-encoder or ensemble classifier")
    p.add_argument("--model", choices=MODEL_KINDS, required=True)
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--val", help="validation manifest (default: the training manifest)")
    p.add_argument("--taxonomy", choices=("compound", "single"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="base learning rate")
    p.add_argument("--warmup-frac", type=float, default=None)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--freeze-encoders", dest="freeze_encoders", action="store_true", default=None)
    g.add_argument("--finetune", dest="freeze_encoders", action="store_false")
    p.add_argument("--pretrained", action="append", metavar="KIND=PATH", help="encoder weights to load (non-strict)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="metrics table, confusion CSV and heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="per-frame predictions for a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True, help="directory of pre-cropped face frames")
    p.add_argument("--out-csv", help="prediction CSV path (default: <out>/predictions.csv)")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--strict", action="store_true", help="abort on the first undecodable frame")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (CERError, OSError, ValueError, ArithmeticError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
