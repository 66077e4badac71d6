"""Training runs, validation, prediction and best-checkpoint selection."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint, save_checkpoint
from .data import DataError, Manifest, Sample, load_images, load_manifest
from .ensemble import CLASSES, MetricReport, PredictionRecord, confusion_matrix, metric_report
from .fileio import atomic_write_text
from .imaging import AugmentPolicy, eval_pipeline, sample_rng, train_pipeline
from .models import build_model, make_config, snapshot_params
from .nn import Module
from .optim import AdamW, AdamWHyper, Schedule, label_smoothed_ce, lr_at

log = logging.getLogger(__name__)

EPOCH_HEADER = ("epoch", "train_loss", "val_acc", "val_sens", "val_spec", "lr", "seconds")

# per-sample / per-step random streams
STREAM_AUGMENT = 0
STREAM_SHUFFLE = 1
STREAM_DROP_PATH = 2


class ConfigError(ValueError):
    pass


class NumericAbortError(FloatingPointError):
    pass


# ---------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------
@dataclass
class RunConfig:
    model_kind: str
    model: object
    augment: AugmentPolicy
    optimizer: AdamWHyper
    train_manifest: Path
    val_manifest: Path
    output_dir: Path
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    label_smoothing: float = 0.1
    warmup_epochs: float = 1.0
    min_lr: float = 1e-6
    warmup_start_lr: float = 1e-6

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be at least 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be non-negative")
        if self.augment.target_size != self.model.img_size:
            raise ConfigError(
                f"augment.target_size {self.augment.target_size} differs from model img_size {self.model.img_size}"
            )

    def schedule(self, steps_per_epoch: int) -> Schedule:
        total = self.epochs * steps_per_epoch
        warmup = min(int(round(self.warmup_epochs * steps_per_epoch)), total - 1)
        min_lr = min(self.min_lr, self.optimizer.lr)
        return Schedule(total, warmup, self.optimizer.lr, min_lr, self.warmup_start_lr)


_TOP_KEYS = {"model", "augment", "optimizer", "schedule", "label_smoothing", "batch_size",
             "epochs", "seed", "data", "output_dir"}


def _only(section: dict, allowed: set, where: str) -> None:
    extra = set(section) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(extra))}")


def config_from_dict(raw: dict, base_dir=".") -> RunConfig:
    """Build a RunConfig from the JSON run-config layout (see README)."""
    base_dir = Path(base_dir)
    try:
        _only(raw, _TOP_KEYS, "run config")
        model_sec = dict(raw["model"])
        _only(model_sec, {"kind", "preset", "config"}, "model")
        kind = model_sec["kind"]
        model_cfg = make_config(kind, model_sec.get("config"), model_sec.get("preset"))
        aug = dict(raw.get("augment", {}))
        aug.setdefault("target_size", model_cfg.img_size)
        augment = AugmentPolicy(**aug)
        optimizer = AdamWHyper(**raw.get("optimizer", {}))
        sched = dict(raw.get("schedule", {}))
        _only(sched, {"warmup_epochs", "min_lr", "warmup_start_lr"}, "schedule")
        data = dict(raw["data"])
        _only(data, {"train", "val"}, "data")
        return RunConfig(
            model_kind=kind,
            model=model_cfg,
            augment=augment,
            optimizer=optimizer,
            train_manifest=base_dir / data["train"],
            val_manifest=base_dir / data["val"],
            output_dir=base_dir / raw["output_dir"],
            batch_size=int(raw.get("batch_size", 64)),
            epochs=int(raw.get("epochs", 10)),
            seed=int(raw.get("seed", 0)),
            label_smoothing=float(raw.get("label_smoothing", 0.1)),
            **{k: float(v) for k, v in sched.items()},
        )
    except KeyError as exc:
        raise ConfigError(f"run config is missing required key {exc}") from None
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(raw, path.parent)


# ---------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------
@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_sensitivity: float
    val_specificity: float
    lr: float
    seconds: float

    def row(self) -> list[str]:
        return [str(self.epoch), repr(self.train_loss), repr(self.val_accuracy), repr(self.val_sensitivity),
                repr(self.val_specificity), repr(self.lr), f"{self.seconds:.3f}"]


def format_epoch_reports(reports: Sequence[EpochReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EPOCH_HEADER)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


@dataclass
class EvalResult:
    metrics: MetricReport | None
    records: list[PredictionRecord]
    errors: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class TrainResult:
    best: Checkpoint
    reports: list[EpochReport]


# ---------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------
def predict_images(model: Module, items: Sequence[tuple[Sample, np.ndarray]], policy: AugmentPolicy,
                   batch_size: int = 64, traces: list | None = None) -> list[PredictionRecord]:
    """Eval-pipeline forward passes; probabilities are a float64 softmax of the logits."""
    model.eval()
    records = []
    with ag.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            batch = []
            for sample, img in chunk:
                trace = [] if traces is not None else None
                batch.append(eval_pipeline(img, policy, trace))
                if traces is not None:
                    traces.append(trace)
            logits = model(ag.Tensor(np.stack(batch))).data.astype(np.float64)
            probs = ag.softmax(ag.Tensor(logits, dtype=np.float64), axis=-1).data
            records.extend(PredictionRecord(s.image_id, tuple(p)) for (s, _), p in zip(chunk, probs))
    return records


def evaluate(model: Module, manifest: Manifest, policy: AugmentPolicy, batch_size: int = 64,
             traces: list | None = None) -> EvalResult:
    """Predict every readable image of ``manifest`` and score against its labels.

    Unreadable images are skipped and returned in ``errors``.
    """
    items, errors = load_images(manifest)
    records = predict_images(model, items, policy, batch_size, traces)
    metrics = None
    if records:
        labels = [s.label for s, _ in items]
        metrics = metric_report(confusion_matrix([r.pred_label for r in records], labels))
    return EvalResult(metrics, records, errors)


def format_errors(errors: Sequence[tuple[str, str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", "error"])
    writer.writerows(errors)
    return buf.getvalue()


# ---------------------------------------------------------------------
# training
# ---------------------------------------------------------------------
def _checkpoint(cfg: RunConfig, model: Module, opt: AdamW, epoch: int, val_acc: float) -> Checkpoint:
    return Checkpoint(
        kind=cfg.model_kind,
        model_config=cfg.model.to_dict(),
        params=snapshot_params(model),
        opt_m=[m.astype(np.float32) for m in opt.state.m],
        opt_v=[v.astype(np.float32) for v in opt.state.v],
        opt_step=opt.state.step,
        epoch=epoch,
        val_accuracy=val_acc,
        rng_state={"generator": "PCG64", "seed": cfg.seed, "epoch": epoch},
        augment=cfg.augment.to_dict(),
    )


def _load_split(path: Path, name: str) -> list[tuple[Sample, np.ndarray]]:
    manifest = load_manifest(path)
    manifest.check_files()
    items, errors = load_images(manifest)
    if errors:
        raise DataError(f"{name} set: cannot decode {errors[0][0]} ({errors[0][1]})")
    if not items:
        raise DataError(f"{name} set is empty")
    missing = set(range(len(CLASSES))) - {s.label for s, _ in items}
    if name == "train" and missing:
        raise DataError(f"train set lacks label(s) {', '.join(CLASSES[i] for i in sorted(missing))}")
    return items


def train_run(cfg: RunConfig, model: Module | None = None) -> TrainResult:
    """Train, validate after each epoch and keep the best-accuracy checkpoint.

    Writes ``best.ckpt``, ``epochs.csv`` and ``curves.png`` under
    ``cfg.output_dir``.  Ties in validation accuracy keep the earlier
    epoch.  A non-finite loss raises NumericAbortError; whatever
    ``best.ckpt`` was written before stays in place.
    """
    from .plotting import plot_training_curves

    train_items = _load_split(cfg.train_manifest, "train")
    val_items = _load_split(cfg.val_manifest, "val")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    if model is None:
        model = build_model(cfg.model_kind, cfg.model, cfg.seed)
    opt = AdamW(model.parameters(), cfg.optimizer)
    n = len(train_items)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    schedule = cfg.schedule(steps_per_epoch)
    step = 0
    reports: list[EpochReport] = []
    best: Checkpoint | None = None

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = sample_rng(cfg.seed, epoch, 0, STREAM_SHUFFLE).permutation(n)
        model.train()
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = np.stack([
                train_pipeline(train_items[i][1], cfg.augment, sample_rng(cfg.seed, epoch, int(i), STREAM_AUGMENT))
                for i in idx
            ])
            y = [train_items[i][0].label for i in idx]
            model.set_rng(sample_rng(cfg.seed, epoch, b, STREAM_DROP_PATH))
            loss = label_smoothed_ce(model(ag.Tensor(x)), y, cfg.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericAbortError(f"non-finite loss {value} at epoch {epoch}, step {b}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(step, schedule))
            step += 1
            losses.append(value * len(idx))
        model.set_rng(None)

        records = predict_images(model, val_items, cfg.augment, cfg.batch_size)
        cm = confusion_matrix([r.pred_label for r in records], [s.label for s, _ in val_items])
        metrics = metric_report(cm)
        report = EpochReport(
            epoch=epoch,
            train_loss=float(sum(losses) / n),
            val_accuracy=metrics.accuracy,
            val_sensitivity=metrics.sensitivity_macro,
            val_specificity=metrics.specificity_macro,
            lr=lr_at(step, schedule),
            seconds=time.perf_counter() - started,
        )
        reports.append(report)
        log.info("epoch %d loss %.4f val_acc %.4f lr %.2e", epoch, report.train_loss, report.val_accuracy, report.lr)
        if best is None or metrics.accuracy > best.val_accuracy:
            best = _checkpoint(cfg, model, opt, epoch, metrics.accuracy)
            save_checkpoint(best, out / "best.ckpt")
        atomic_write_text(out / "epochs.csv", format_epoch_reports(reports))

    plot_training_curves(reports, out / "curves.png")
    return TrainResult(best, reports)


def run_config_dict(cfg: RunConfig) -> dict:
    """JSON-ready echo of a resolved config."""
    return {
        "model": {"kind": cfg.model_kind, "config": cfg.model.to_dict()},
        "augment": cfg.augment.to_dict(),
        "optimizer": asdict(cfg.optimizer),
        "schedule": {"warmup_epochs": cfg.warmup_epochs, "min_lr": cfg.min_lr,
                     "warmup_start_lr": cfg.warmup_start_lr},
        "label_smoothing": cfg.label_smoothing,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "data": {"train": str(cfg.train_manifest), "val": str(cfg.val_manifest)},
        "output_dir": str(cfg.output_dir),
    }
