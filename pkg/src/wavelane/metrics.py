"""Pixel-level segmentation metrics from a 2x2 confusion matrix.

``counts[i, j]`` is the number of pixels of true class ``i`` predicted as
class ``j``; class 1 is lane.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .tensor import ShapeError

N_CLASSES = 2


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.uint64))

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != (N_CLASSES, N_CLASSES):
            raise ShapeError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES}, got {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts.astype(np.uint64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def true_totals(self) -> np.ndarray:
        """t_i: pixels whose true class is i."""
        return self.counts.sum(axis=1)

    @property
    def predicted_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def _check_binary(mask: np.ndarray, what: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > 1):
        raise ValueError(f"{what} mask must be binary (0/1)")
    return mask.astype(np.int64)


def accumulate(cm: ConfusionMatrix, prediction, truth) -> ConfusionMatrix:
    prediction = np.asarray(prediction)
    truth = np.asarray(truth)
    if prediction.shape != truth.shape:
        raise ShapeError(f"prediction {prediction.shape} and truth {truth.shape} differ in shape")
    p = _check_binary(prediction, "prediction").ravel()
    t = _check_binary(truth, "truth").ravel()
    tally = np.bincount(t * N_CLASSES + p, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)
    return ConfusionMatrix(cm.counts + tally.astype(np.uint64))


def confusion(prediction, truth) -> ConfusionMatrix:
    return accumulate(ConfusionMatrix(), prediction, truth)


@dataclass(frozen=True)
class MetricReport:
    pixel_accuracy: float
    mean_accuracy: float
    mean_iou: float
    fw_iou: float
    dice: float
    precision: tuple[float, float]
    recall: tuple[float, float]
    iou: tuple[float, float]
    flags: tuple[str, ...] = ()

    @property
    def lane_iou(self) -> float:
        return self.iou[1]

    def as_dict(self) -> dict[str, float]:
        """Flat key/value view (per-class entries suffixed ``_background``/``_lane``)."""
        out: dict[str, float] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "flags":
                continue
            if isinstance(v, tuple):
                out[f"{f.name}_background"] = v[0]
                out[f"{f.name}_lane"] = v[1]
            else:
                out[f.name] = v
        return out

    def to_text(self) -> str:
        lines = [f"{k} = {v:.10f}" for k, v in self.as_dict().items()]
        lines.append(f"flags = {','.join(self.flags)}")
        return "\n".join(lines) + "\n"


def report(cm: ConfusionMatrix) -> MetricReport:
    n = cm.counts.astype(np.float64)
    if cm.total == 0:
        raise ValueError("cannot report metrics on an empty confusion matrix")
    t = n.sum(axis=1)
    pred = n.sum(axis=0)
    diag = np.diag(n)
    flags: list[str] = []

    present = (t > 0) | (pred > 0)
    for i in range(N_CLASSES):
        if not present[i]:
            flags.append(f"class{i}_absent")
        elif t[i] == 0:
            flags.append(f"class{i}_no_truth")

    acc = np.divide(diag, t, out=np.zeros(N_CLASSES), where=t > 0)
    union = t + pred - diag
    iou = np.divide(diag, union, out=np.zeros(N_CLASSES), where=union > 0)
    recall = acc
    precision = np.divide(diag, pred, out=np.zeros(N_CLASSES), where=pred > 0)
    for i in range(N_CLASSES):
        if present[i] and pred[i] == 0:
            flags.append(f"class{i}_no_prediction")

    n_cl = int(present.sum())
    mean_acc = float(acc[present].sum() / n_cl)
    mean_iou = float(iou[present].sum() / n_cl)
    fw_iou = float((t * iou).sum() / t.sum())
    denom = pred[1] + t[1]
    if denom == 0:
        flags.append("dice_undefined")
    dice = float(2.0 * diag[1] / denom) if denom > 0 else 0.0
    return MetricReport(
        pixel_accuracy=float(diag.sum() / t.sum()),
        mean_accuracy=mean_acc,
        mean_iou=mean_iou,
        fw_iou=fw_iou,
        dice=dice,
        precision=(float(precision[0]), float(precision[1])),
        recall=(float(recall[0]), float(recall[1])),
        iou=(float(iou[0]), float(iou[1])),
        flags=tuple(flags),
    )
