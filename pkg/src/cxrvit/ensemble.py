"""Weighted probability averaging, argmax classification and the
accuracy / sensitivity / specificity metrics.

Class order is fixed everywhere: COVID-19 = 0, Normal = 1, Pneumonia = 2.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

CLASSES = ("COVID-19", "Normal", "Pneumonia")
PRED_HEADER = ("image_id", "p_covid19", "p_normal", "p_pneumonia", "pred_label")


class IdMismatchError(ValueError):
    def __init__(self, difference: Sequence[str]):
        self.difference = sorted(difference)
        shown = ", ".join(self.difference[:10])
        more = "" if len(self.difference) <= 10 else f" (+{len(self.difference) - 10} more)"
        super().__init__(f"image id sets differ: {shown}{more}")


def label_index(label: str) -> int:
    try:
        return CLASSES.index(label)
    except ValueError:
        raise ValueError(f"unknown label {label!r}; expected one of {', '.join(CLASSES)}") from None


def classify(probs: Sequence[float]) -> int:
    """argmax, ties going to the lowest class index."""
    return int(np.argmax(np.asarray(probs)))


@dataclass
class PredictionRecord:
    image_id: str
    probs: tuple[float, ...]
    pred_label: int = -1

    def __post_init__(self):
        self.probs = tuple(float(p) for p in self.probs)
        if self.pred_label < 0:
            self.pred_label = classify(self.probs)


# ---------------------------------------------------------------------
# record files
# ---------------------------------------------------------------------
def format_records(records: Iterable[PredictionRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PRED_HEADER)
    for r in records:
        writer.writerow([r.image_id, *(repr(p) for p in r.probs), CLASSES[r.pred_label]])
    return buf.getvalue()


def parse_records(text: str) -> list[PredictionRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != PRED_HEADER:
        raise ValueError(f"prediction file header must be {','.join(PRED_HEADER)}")
    records = []
    seen = set()
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(PRED_HEADER):
            raise ValueError(f"line {line}: expected {len(PRED_HEADER)} fields, got {len(row)}")
        if row[0] in seen:
            raise ValueError(f"line {line}: duplicate image id {row[0]!r}")
        seen.add(row[0])
        probs = tuple(float(v) for v in row[1:4])
        records.append(PredictionRecord(row[0], probs, label_index(row[4])))
    return records


def read_records(path) -> list[PredictionRecord]:
    with open(path, newline="") as fh:
        return parse_records(fh.read())


# ---------------------------------------------------------------------
# ensembling
# ---------------------------------------------------------------------
def normalized_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError(f"weights must be positive finite reals, got {list(weights)}")
    return w / w.sum()


def weighted_average(prob_sets: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Convex combination sum_i w_i p_i / sum_i w_i of (N, K) probability arrays.

    Weights are normalised before mixing, so any positive rescaling of
    ``weights`` gives bit-identical output.
    """
    if len(prob_sets) != len(weights):
        raise ValueError(f"{len(prob_sets)} members but {len(weights)} weights")
    w = normalized_weights(weights)
    out = np.zeros_like(np.asarray(prob_sets[0], dtype=np.float64))
    for wi, p in zip(w, prob_sets):
        out = out + wi * np.asarray(p, dtype=np.float64)
    return out


def ensemble_records(members: Sequence[Sequence[PredictionRecord]], weights: Sequence[float]) -> list[PredictionRecord]:
    """Average member records image by image, in the first member's order."""
    if not members:
        raise ValueError("need at least one member")
    index = [{r.image_id: r for r in m} for m in members]
    ids = [r.image_id for r in members[0]]
    base = set(ids)
    for other in index[1:]:
        diff = base.symmetric_difference(other)
        if diff:
            raise IdMismatchError(diff)
    stacks = [np.array([idx[i].probs for i in ids]) for idx in index]
    mixed = weighted_average(stacks, weights)
    return [PredictionRecord(i, tuple(row)) for i, row in zip(ids, mixed)]


# ---------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------
def confusion_matrix(preds: Sequence[int], labels: Sequence[int], num_classes: int = 3) -> np.ndarray:
    """Counts with rows = true label, columns = prediction."""
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.intp), np.asarray(preds, dtype=np.intp)), 1)
    return cm


@dataclass
class MetricReport:
    accuracy: float
    sensitivity_macro: float
    specificity_macro: float
    sensitivity_micro: float
    specificity_micro: float
    per_class: dict[str, dict[str, float | None]]
    confusion: list[list[int]]
    total: int
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "sensitivity": {"macro": self.sensitivity_macro, "micro": self.sensitivity_micro},
            "specificity": {"macro": self.specificity_macro, "micro": self.specificity_micro},
            "per_class": self.per_class,
            "confusion_matrix": self.confusion,
            "total": self.total,
            "undefined": self.undefined,
        }


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else float(num / den)


def metric_report(cm: np.ndarray, classes: Sequence[str] = CLASSES) -> MetricReport:
    """Accuracy plus per-class, macro and micro sensitivity/specificity.

    A class without support has undefined sensitivity (None); it is left
    out of the macro mean and listed in ``undefined``.  Specificity is
    treated the same way when a class has no negatives.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or np.any(cm < 0):
        raise ValueError("confusion matrix must be square with non-negative counts")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.int64)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = total - tp - fn - fp
    per_class: dict[str, dict[str, float | None]] = {}
    undefined = []
    sens, spec = [], []
    for i, name in enumerate(classes):
        se = _ratio(tp[i], tp[i] + fn[i])
        sp = _ratio(tn[i], tn[i] + fp[i])
        per_class[name] = {"sensitivity": se, "specificity": sp, "support": int(tp[i] + fn[i])}
        if se is None:
            undefined.append(f"{name}:sensitivity")
        else:
            sens.append(se)
        if sp is None:
            undefined.append(f"{name}:specificity")
        else:
            spec.append(sp)
    return MetricReport(
        accuracy=float(tp.sum() / total),
        sensitivity_macro=float(np.mean(sens)) if sens else math.nan,
        specificity_macro=float(np.mean(spec)) if spec else math.nan,
        sensitivity_micro=float(tp.sum() / (tp.sum() + fn.sum())),
        specificity_micro=float(tn.sum() / (tn.sum() + fp.sum())),
        per_class=per_class,
        confusion=cm.astype(int).tolist(),
        total=total,
        undefined=undefined,
    )


def score_records(records: Sequence[PredictionRecord], truth: Mapping[str, int]) -> MetricReport:
    missing = [r.image_id for r in records if r.image_id not in truth]
    if missing or len(records) != len(truth):
        raise IdMismatchError(set(truth).symmetric_difference(r.image_id for r in records))
    preds = [r.pred_label for r in records]
    labels = [truth[r.image_id] for r in records]
    return metric_report(confusion_matrix(preds, labels))


@dataclass
class SweepRow:
    models: str
    weights: str
    report: MetricReport


def ensemble_sweep(members: Mapping[str, Sequence[PredictionRecord]], weight_grid: Sequence[Sequence[float]],
                   truth: Mapping[str, int]) -> list[SweepRow]:
    """Solo rows for each member, then one row per weight tuple in the grid."""
    if len(members) < 2:
        raise ValueError("a sweep needs at least two members")
    names = list(members)
    rows = [SweepRow(name, "/", score_records(members[name], truth)) for name in names]
    for weights in weight_grid:
        if len(weights) != len(names):
            raise ValueError(f"weight tuple {tuple(weights)} does not match {len(names)} members")
        mixed = ensemble_records([members[n] for n in names], weights)
        rows.append(SweepRow(", ".join(names), ":".join(_fmt_weight(w) for w in weights), score_records(mixed, truth)))
    return rows


def _fmt_weight(w: float) -> str:
    return str(int(w)) if float(w).is_integer() else repr(float(w))


def format_sweep(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Models", "Weights", "Accuracy"])
    for row in rows:
        writer.writerow([row.models, row.weights, f"{row.report.accuracy:.4f}"])
    return buf.getvalue()
