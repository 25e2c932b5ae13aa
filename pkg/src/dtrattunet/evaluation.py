"""Logit discretization, pixel confusion counting, F1/Dice/IoU, and reports.

F1 and IoU are micro metrics: confusion counts are pooled over all evaluated
images first, then the formula is applied once. Dice is the macro companion,
the per-image Dice averaged across images. All three are reported as
percentages in [0, 100]. Counting is embarrassingly parallel across images
and pooling is an order-independent integer sum.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .data import DatasetError, SliceSample, preprocess

CLASS_LABELS = {
    "binary": (("infection", 1),),
    "multiclass": (("GGO", 1), ("Consolidation", 2)),
}


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest pixel counts; tp+fp+fn+tn equals the pixel count."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def discretize(logits, task: str, threshold: float = 0.5) -> np.ndarray:
    """Turn logits into an integer label map.

    Binary: label 1 where sigmoid(logit) exceeds the threshold strictly.
    Multi-class: per-pixel argmax over the three channels, ties resolved
    toward the lowest class index.
    """
    arr = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (B,C,H,W) logits, got shape {arr.shape}")
    channels = arr.shape[1]
    if task == "binary":
        if channels != 1:
            raise ValueError(f"binary task expects 1 channel, got {channels}")
        labels = (_sigmoid(arr[:, 0]) > threshold).astype(np.int64)
    elif task == "multiclass":
        if channels != 3:
            raise ValueError(f"multiclass task expects 3 channels, got {channels}")
        labels = np.argmax(arr, axis=1).astype(np.int64)
    else:
        raise ValueError(f"unknown task {task!r}")
    return labels[0] if squeeze else labels


def confusion_counts(pred: np.ndarray, gt: np.ndarray, class_id: int) -> ConfusionCounts:
    """One-vs-rest counts for ``class_id`` over a single label map pair."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


def _pool(counts) -> ConfusionCounts:
    if isinstance(counts, ConfusionCounts):
        return counts
    total = ConfusionCounts(0, 0, 0, 0)
    for c in counts:
        total = total + c
    return total


def _dice_percent(c: ConfusionCounts) -> float:
    """Per-image Dice with the degenerate rule isolated here.

    An image with empty ground truth and empty prediction scores 100; an
    empty ground truth with any predicted pixels scores 0 (the formula's own
    value).
    """
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * c.tp / denom


def f1_micro(counts) -> float:
    """Pool counts over all images, then 100 * 2TP / (2TP + FP + FN)."""
    return _dice_percent(_pool(counts))


def iou_micro(counts) -> float:
    """Pool counts over all images, then 100 * TP / (TP + FP + FN)."""
    c = _pool(counts)
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 100.0
    return 100.0 * c.tp / denom


def dice_macro(per_image_counts) -> float:
    """Average the per-image Dice scores."""
    per_image = list(per_image_counts)
    if not per_image:
        raise ValueError("dice_macro needs at least one image")
    return float(np.mean([_dice_percent(c) for c in per_image]))


@dataclass
class ClassReport:
    label: str
    class_id: int
    f1: float
    dice: float
    iou: float
    n_images: int
    per_image_dice: list[tuple[str, float]] | None = None


@dataclass
class MetricsReport:
    task: str
    classes: list[ClassReport]
    n_images: int

    def __getitem__(self, label: str) -> ClassReport:
        for entry in self.classes:
            if entry.label == label:
                return entry
        raise KeyError(label)


def evaluate(
    model,
    samples: list[SliceSample],
    model_config: ModelConfig,
    threshold: float = 0.5,
    batch_size: int = 4,
    include_lung: bool = False,
    per_image: bool = False,
    hu_window: tuple[float, float] | None = None,
) -> MetricsReport:
    """Run the model over a labeled corpus and report per-class F1/Dice/IoU.

    The infection classes follow the task (infection, or GGO and consolidation
    with background excluded); ``include_lung`` adds a lung row when the model
    has a second decoder. Metrics are computed at model resolution against the
    nearest-neighbor resized ground truth.
    """
    task = model_config.task
    missing = [s.source_id for s in samples if s.infection_mask is None]
    if include_lung:
        missing += [s.source_id for s in samples if s.lung_mask is None]
    if missing:
        raise DatasetError(
            "samples lack ground-truth masks: " + ", ".join(sorted(set(missing)))
        )
    if not samples:
        raise DatasetError("cannot evaluate an empty sample list")

    class_list = list(CLASS_LABELS[task])
    counts: dict[str, list[ConfusionCounts]] = {label: [] for label, _ in class_list}
    lung_counts: list[ConfusionCounts] = []
    source_ids = [s.source_id for s in samples]

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start : start + batch_size]
                pairs = [preprocess(s, model_config, hu_window=hu_window) for s in chunk]
                batch = torch.stack([inputs for inputs, _ in pairs])
                out = model(batch)
                pred = discretize(out.infection, task, threshold)
                for j, (_, targets) in enumerate(pairs):
                    gt = targets["infection"].numpy()
                    for label, cid in class_list:
                        counts[label].append(confusion_counts(pred[j], gt, cid))
                if include_lung:
                    if out.lung is None:
                        raise ValueError("include_lung requires a dual-decoder model")
                    lung_pred = discretize(out.lung, "binary", threshold)
                    for j, (_, targets) in enumerate(pairs):
                        lung_counts.append(
                            confusion_counts(lung_pred[j], targets["lung"].numpy(), 1)
                        )
    finally:
        model.train(was_training)

    def _class_report(label: str, cid: int, per_counts: list[ConfusionCounts]) -> ClassReport:
        detail = None
        if per_image:
            detail = [(sid, _dice_percent(c)) for sid, c in zip(source_ids, per_counts)]
        return ClassReport(
            label=label,
            class_id=cid,
            f1=f1_micro(per_counts),
            dice=dice_macro(per_counts),
            iou=iou_micro(per_counts),
            n_images=len(per_counts),
            per_image_dice=detail,
        )

    reports = [_class_report(label, cid, counts[label]) for label, cid in class_list]
    if include_lung:
        reports.append(_class_report("lung", 1, lung_counts))
    return MetricsReport(task=task, classes=reports, n_images=len(samples))


@dataclass
class AggregateReport:
    """Per-class mean and population std of each metric across repeated runs."""

    task: str
    runs: int
    classes: list[dict] = field(default_factory=list)


def aggregate_reports(reports: list[MetricsReport]) -> AggregateReport:
    """Combine per-run reports into mean +- population std per class and metric."""
    if not reports:
        raise ValueError("no reports to aggregate")
    labels = [c.label for c in reports[0].classes]
    for r in reports[1:]:
        if [c.label for c in r.classes] != labels:
            raise ValueError("reports disagree on class labels")
    out = AggregateReport(task=reports[0].task, runs=len(reports))
    for label in labels:
        entry: dict = {"label": label, "n_images": reports[0][label].n_images}
        for metric in ("f1", "dice", "iou"):
            values = [getattr(r[label], metric) for r in reports]
            entry[metric] = {
                "values": values,
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),  # population convention, n divisor
            }
        out.classes.append(entry)
    return out


def _report_rows(report: MetricsReport | AggregateReport) -> list[dict]:
    rows = []
    if isinstance(report, MetricsReport):
        for c in report.classes:
            rows.append(
                {
                    "task": report.task,
                    "class": c.label,
                    "f1": round(c.f1, 4),
                    "dice": round(c.dice, 4),
                    "iou": round(c.iou, 4),
                    "n_images": c.n_images,
                    "runs": 1,
                    "mean": round(c.f1, 4),
                    "std": 0.0,
                }
            )
    else:
        for entry in report.classes:
            row = {"task": report.task, "class": entry["label"]}
            for metric in ("f1", "dice", "iou"):
                cell = entry[metric]
                row[metric] = f"{cell['mean']:.2f}±{cell['std']:.2f}"
            row["n_images"] = entry["n_images"]
            row["runs"] = report.runs
            row["mean"] = round(entry["f1"]["mean"], 4)
            row["std"] = round(entry["f1"]["std"], 4)
            rows.append(row)
    return rows


def report_payload(report: MetricsReport | AggregateReport) -> dict:
    """A fully numeric JSON-ready view of a single-run or aggregated report."""
    if isinstance(report, MetricsReport):
        return {
            "task": report.task,
            "runs": 1,
            "n_images": report.n_images,
            "classes": [
                {
                    "label": c.label,
                    "class_id": c.class_id,
                    "f1": c.f1,
                    "dice": c.dice,
                    "iou": c.iou,
                    "n_images": c.n_images,
                    **(
                        {"per_image_dice": [{"source_id": s, "dice": d} for s, d in c.per_image_dice]}
                        if c.per_image_dice is not None
                        else {}
                    ),
                }
                for c in report.classes
            ],
        }
    return {"task": report.task, "runs": report.runs, "classes": report.classes}


def write_report_csv(path, report: MetricsReport | AggregateReport) -> None:
    rows = _report_rows(report)
    fields = ["task", "class", "f1", "dice", "iou", "n_images", "runs", "mean", "std"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def write_report_json(path, report: MetricsReport | AggregateReport) -> None:
    Path(path).write_text(json.dumps(report_payload(report), indent=2))


OVERLAY_COLORS = {1: (0, 255, 0), 2: (255, 0, 0)}  # GGO green, consolidation red
CONTOUR_COLOR = (0, 255, 255)


def _contour(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[1:-1, 1:-1]
        & padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    return m & ~interior


def render_overlay(
    image: np.ndarray,
    labels: np.ndarray,
    lung_mask: np.ndarray | None = None,
    alpha: float = 0.5,
) -> np.ndarray:
    """Blend a label map over a grayscale slice at the given opacity.

    Label 1 renders green and label 2 red; when a lung mask is supplied its
    contour is drawn in cyan at full opacity. Returns an (H, W, 3) uint8 image.
    """
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    gray = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    if labels.shape != image.shape:
        raise ValueError(f"label shape {labels.shape} does not match image {image.shape}")

    out = np.repeat((gray * 255.0)[:, :, None], 3, axis=2)
    for label, color in OVERLAY_COLORS.items():
        where = labels == label
        out[where] = (1.0 - alpha) * out[where] + alpha * np.asarray(color, dtype=np.float64)
    if lung_mask is not None:
        out[_contour(lung_mask)] = CONTOUR_COLOR
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
