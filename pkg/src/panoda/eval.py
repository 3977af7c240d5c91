"""Confusion matrices, IoU, and the per-angle (omnidirectional) breakdown."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .datamodel import IGNORE, read_label


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions; IGNORE pixels are never counted."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> ConfusionMatrix:
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)


def _np(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    pred, gt = _np(pred).astype(np.int64), _np(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise MetricsError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    c = cm.num_classes
    keep = gt != IGNORE
    g, p = gt[keep], pred[keep]
    if g.size and (g.min() < 0 or g.max() >= c or p.min() < 0 or p.max() >= c):
        raise MetricsError(f"class index out of range [0, {c})")
    cm.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    return cm


def iou_report(cm: ConfusionMatrix) -> dict:
    """Per-class IoU (None where a class has zero union) and their mean over present classes."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(0) + counts.sum(1) - tp
    present = union > 0
    if not present.any():
        raise MetricsError("no class present in ground truth or prediction")
    per_class = [float(tp[c] / union[c]) if present[c] else None for c in range(cm.num_classes)]
    return {"per_class": per_class, "miou": float(np.mean(tp[present] / union[present]))}


def angle_slices(width: int, angles: int = 8) -> list[slice]:
    if width % angles:
        raise MetricsError(f"image width {width} is not divisible by {angles}")
    step = width // angles
    return [slice(i * step, (i + 1) * step) for i in range(angles)]


def omnidirectional_matrices(preds: Iterable, gts: Iterable, num_classes: int, angles: int = 8) -> list[ConfusionMatrix]:
    mats = [ConfusionMatrix.zeros(num_classes) for _ in range(angles)]
    for pred, gt in zip(preds, gts):
        pred, gt = _np(pred), _np(gt)
        for cm, sl in zip(mats, angle_slices(gt.shape[-1], angles)):
            accumulate(cm, pred[..., sl], gt[..., sl])
    return mats


def omnidirectional(preds: Sequence, gts: Sequence, num_classes: int, angles: int = 8) -> list[float]:
    """mIoU of each of ``angles`` equal column slices, pooled over the whole test set."""
    return [iou_report(cm)["miou"] for cm in omnidirectional_matrices(preds, gts, num_classes, angles)]


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    per_class: list
    miou: float
    angle_miou: list[float]

    def as_row(self) -> dict:
        row = {"miou": self.miou}
        for c, v in enumerate(self.per_class):
            row[f"iou_{c}"] = "" if v is None else v
        for a, v in enumerate(self.angle_miou):
            row[f"angle_{a}"] = v
        return row


def evaluate_predictions(preds: Sequence, gts: Sequence, num_classes: int, angles: int = 8) -> MetricsReport:
    mats = omnidirectional_matrices(preds, gts, num_classes, angles)
    total = sum(mats[1:], mats[0])
    rep = iou_report(total)
    return MetricsReport(total, rep["per_class"], rep["miou"], [iou_report(m)["miou"] for m in mats])


@torch.no_grad()
def predict(model, images: Sequence[np.ndarray], batch_size: int = 16) -> list[np.ndarray]:
    """Fused three-head predictions for H x W x 3 float images."""
    from .segnet import fused_inference

    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.stack(images[i:i + batch_size])).permute(0, 3, 1, 2).float()
        out.extend(fused_inference(model, x).numpy().astype(np.uint8))
    model.train(was_training)
    return out


def evaluate_model(model, images, gts, num_classes: int, angles: int = 8) -> MetricsReport:
    return evaluate_predictions(predict(model, images), gts, num_classes, angles)


def load_target_eval(root: str | Path) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Target images and their evaluation labels (``target_eval/labels``)."""
    from .datamodel import read_rgb

    root = Path(root)
    label_dir = root / "target_eval" / "labels"
    if not label_dir.is_dir():
        raise MetricsError(f"{label_dir} not found")
    images, labels = [], []
    for p in sorted((root / "target" / "images").glob("*.png")):
        lp = label_dir / p.name
        if not lp.is_file():
            raise MetricsError(f"missing evaluation label {lp}")
        images.append(read_rgb(p))
        labels.append(read_label(lp))
    return images, labels


def write_metrics_csv(path: str | Path, reports: dict[str, MetricsReport]) -> None:
    rows = [{"model": name, **rep.as_row()} for name, rep in reports.items()]
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def markdown_table(reports: dict[str, MetricsReport], class_names: Sequence[str] | None = None) -> str:
    """Method | mIoU | per-class IoU columns, in percent."""
    first = next(iter(reports.values()))
    names = list(class_names or [f"c{i}" for i in range(first.confusion.num_classes)])
    lines = ["| Method | mIoU | " + " | ".join(names) + " |",
             "|---|---|" + "---|" * len(names)]
    for method, rep in reports.items():
        cells = ["-" if v is None else f"{100 * v:.2f}" for v in rep.per_class]
        lines.append(f"| {method} | {100 * rep.miou:.2f} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("| Method | " + " | ".join(f"{45 * a}-{45 * (a + 1)}" for a in range(len(first.angle_miou))) + " |")
    lines.append("|---|" + "---|" * len(first.angle_miou))
    for method, rep in reports.items():
        lines.append(f"| {method} | " + " | ".join(f"{100 * v:.2f}" for v in rep.angle_miou) + " |")
    return "\n".join(lines) + "\n"
