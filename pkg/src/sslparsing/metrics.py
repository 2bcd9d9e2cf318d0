"""Confusion matrices, parsing metrics, challenge-factor slices and size buckets."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from .errors import MetricsError
from .raster_io import DatasetIndex, Record, read_label_map, tag_challenge_factors
from .taxonomy import IGNORE_ID, PartTaxonomy

SLICE_NAMES = ("occlusion", "full-body", "upper-body", "head-missed", "back-view")
AbsentRule = Literal["exclude", "zero"]


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, rows = ground truth, cols = prediction
    total_ignored: int = 0

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), 0)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.total_ignored

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return merge_confusion(self, other)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConfusionMatrix)
            and self.total_ignored == other.total_ignored
            and np.array_equal(self.counts, other.counts)
        )


@dataclass(frozen=True)
class MetricsReport:
    overall_accuracy: float
    mean_accuracy: float
    mean_iou: float
    per_class_iou: tuple[tuple[int, float | None], ...]
    classes_excluded: frozenset[int]
    pixel_counts: tuple[int, ...]
    absent_class_rule: str = "exclude"
    per_class_accuracy: tuple[tuple[int, float | None], ...] = field(default=(), compare=False)

    def iou(self, cid: int) -> float | None:
        return dict(self.per_class_iou)[cid]


def accumulate_confusion(
    gt: np.ndarray, pred: np.ndarray, num_classes: int, ignore_id: int = IGNORE_ID
) -> ConfusionMatrix:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise MetricsError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    valid = gt != ignore_id
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise MetricsError(f"ground-truth label out of range for {num_classes} classes")
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise MetricsError(f"predicted label out of range for {num_classes} classes")
    counts = np.bincount(g * num_classes + p, minlength=num_classes ** 2)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes), int((~valid).sum()))


def merge_confusion(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.counts.shape != b.counts.shape:
        raise MetricsError(f"cannot merge {a.num_classes}-class and {b.num_classes}-class matrices")
    return ConfusionMatrix(a.counts + b.counts, a.total_ignored + b.total_ignored)


def reduce_confusion(matrices: Iterable[ConfusionMatrix], num_classes: int) -> ConfusionMatrix:
    out = ConfusionMatrix.zeros(num_classes)
    for m in matrices:
        out = merge_confusion(out, m)
    return out


def compute_metrics(cm: ConfusionMatrix, absent_class_rule: AbsentRule = "exclude") -> MetricsReport:
    """Overall/mean accuracy and per-class IoU.

    Classes with an empty union are left out of the mean IoU under the
    ``"exclude"`` rule and scored 0 under ``"zero"``; they are listed in
    ``classes_excluded`` either way. Mean accuracy averages over classes that
    occur in the ground truth.
    """
    counts = cm.counts
    total = int(counts.sum())
    if total == 0:
        raise MetricsError("no evaluated pixels")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    union = rows + cols - diag

    per_acc = []
    accs = []
    ious = []
    per_iou = []
    excluded = set()
    for c in range(cm.num_classes):
        if rows[c] > 0:
            a = int(diag[c]) / int(rows[c])
            accs.append(a)
            per_acc.append((c, a))
        else:
            per_acc.append((c, None))
        if union[c] > 0:
            v = int(diag[c]) / int(union[c])
            ious.append(v)
            per_iou.append((c, v))
        else:
            excluded.add(c)
            per_iou.append((c, None))
            if absent_class_rule == "zero":
                ious.append(0.0)
    return MetricsReport(
        overall_accuracy=int(diag.sum()) / total,
        mean_accuracy=math.fsum(accs) / len(accs),
        mean_iou=math.fsum(ious) / len(ious) if ious else 0.0,
        per_class_iou=tuple(per_iou),
        classes_excluded=frozenset(excluded),
        pixel_counts=tuple(int(r) for r in rows),
        absent_class_rule=absent_class_rule,
        per_class_accuracy=tuple(per_acc),
    )


# -- serialisation ------------------------------------------------------------

def _num(x: float | None) -> str:
    return "null" if x is None else f"{x:.6f}"


def report_to_json(report: MetricsReport) -> str:
    """Deterministic JSON text: fixed key order, six decimal digits."""
    per_class = ", ".join(f'"{c}": {_num(v)}' for c, v in report.per_class_iou)
    excluded = ", ".join(str(c) for c in sorted(report.classes_excluded))
    counts = ", ".join(f'"{c}": {n}' for c, n in enumerate(report.pixel_counts))
    return (
        "{\n"
        f'  "overall_accuracy": {_num(report.overall_accuracy)},\n'
        f'  "mean_accuracy": {_num(report.mean_accuracy)},\n'
        f'  "mean_iou": {_num(report.mean_iou)},\n'
        f'  "per_class_iou": {{{per_class}}},\n'
        f'  "excluded_classes": [{excluded}],\n'
        f'  "absent_class_rule": "{report.absent_class_rule}",\n'
        f'  "pixel_counts": {{{counts}}}\n'
        "}\n"
    )


def report_from_json(text: str) -> dict:
    return json.loads(text)


def slices_to_json(reports: dict[str, MetricsReport], notes: list[str]) -> str:
    body = ",\n".join(
        f'  "{name}": ' + report_to_json(rep).rstrip("\n").replace("\n", "\n  ")
        for name, rep in reports.items()
    )
    return "{\n" + body + ",\n  \"notes\": " + json.dumps(notes) + "\n}\n"


# -- dataset-level evaluation -------------------------------------------------

@dataclass
class SlicedResult:
    reports: dict[str, MetricsReport]
    notes: list[str]
    errors: list[str]
    confusion: dict[str, ConfusionMatrix]

    @property
    def ok(self) -> bool:
        return not self.errors


def prediction_path(pred_dir: str | Path, record: Record) -> Path:
    return Path(pred_dir) / f"{record.image_id}.png"


def _evaluate_record(record: Record, pred_dir: Path, t: PartTaxonomy):
    gt = read_label_map(record.label_path, t.num_classes)
    path = prediction_path(pred_dir, record)
    if not path.exists():
        return None, None, f"{record.image_id}: missing prediction {path}"
    pred = read_label_map(path, t.num_classes)
    if pred.shape != gt.shape:
        return None, None, f"{record.image_id}: prediction shape {pred.shape} != gt {gt.shape}"
    cm = accumulate_confusion(gt, pred, t.num_classes)
    flags = tag_challenge_factors(gt, record.meta, t)
    return cm, flags, None


def evaluate_index(index: DatasetIndex, pred_dir, t: PartTaxonomy, jobs: int = 1):
    """Per-record confusion matrices and factor flags, in manifest order."""
    records = [r for r in index.records if r.label_path is not None]
    pred_dir = Path(pred_dir)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda r: _evaluate_record(r, pred_dir, t), records))
    else:
        results = [_evaluate_record(r, pred_dir, t) for r in records]
    return records, results


def sliced_evaluation(
    index: DatasetIndex,
    pred_dir,
    t: PartTaxonomy,
    jobs: int = 1,
    absent_class_rule: AbsentRule = "exclude",
) -> SlicedResult:
    records, results = evaluate_index(index, pred_dir, t, jobs)
    errors = [err for _, _, err in results if err]
    buckets = {name: ConfusionMatrix.zeros(t.num_classes) for name in ("all", *SLICE_NAMES)}
    for cm, flags, err in results:
        if err:
            continue
        buckets["all"] = buckets["all"] + cm
        for name, on in flags.as_dict().items():
            if on:
                buckets[name] = buckets[name] + cm

    reports: dict[str, MetricsReport] = {}
    notes: list[str] = []
    for name, cm in buckets.items():
        if cm.counts.sum() == 0:
            notes.append(f"slice {name!r} is empty and was omitted")
            continue
        reports[name] = compute_metrics(cm, absent_class_rule)
    return SlicedResult(reports, notes, errors, buckets)


def area_bucket(
    gt: np.ndarray,
    background_id: int = 0,
    thresholds: tuple[int, int] = (153 ** 2, 321 ** 2),
    ignore_id: int = IGNORE_ID,
) -> str:
    gt = np.asarray(gt)
    area = int(((gt != background_id) & (gt != ignore_id)).sum())
    small, large = thresholds
    if area < small:
        return "small"
    if area < large:
        return "medium"
    return "large"
