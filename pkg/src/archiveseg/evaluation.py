"""IoU bookkeeping, size-stratified mIoU and background thresholding of soft scores."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .datamodel import IGNORE, LabelMask

DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(20))
DEFAULT_STRATA_CUTS = (0.01, 0.1, 0.5)
STRATA = ("S", "MS", "ML", "L")


def _labels(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)


class ConfusionAccumulator:
    """``matrix[gt, pred]`` pixel counts; IGNORE gt pixels are never counted."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def accumulate(self, pred, gt) -> "ConfusionAccumulator":
        p, g = _labels(pred), _labels(gt)
        if p.shape != g.shape:
            raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
        valid = g != IGNORE
        g = g[valid].astype(np.int64)
        p = p[valid].astype(np.int64)
        k = self.num_classes
        if g.size and (g.max() >= k or p.max() >= k or p.min() < 0 or g.min() < 0):
            raise ValueError(f"labels outside 0..{k - 1}")
        self.matrix += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        out = ConfusionAccumulator(self.num_classes)
        out.matrix = self.matrix + other.matrix
        return out


def accumulate(acc: ConfusionAccumulator, pred, gt) -> ConfusionAccumulator:
    return acc.accumulate(pred, gt)


def compute_iou(acc: ConfusionAccumulator, include_background: bool = True
                ) -> tuple[list[float | None], float]:
    """Per-class IoU (None where the class never occurs) and their mean."""
    if acc.total == 0:
        raise ValueError("empty accumulator")
    m = acc.matrix
    tp = np.diag(m)
    union = m.sum(axis=0) + m.sum(axis=1) - tp
    per_class = [float(tp[c] / union[c]) if union[c] else None for c in range(acc.num_classes)]
    classes = per_class if include_background else per_class[1:]
    defined = [v for v in classes if v is not None]
    miou = float(np.mean(defined)) if defined else float("nan")
    return per_class, miou


def foreground_ratio(gt) -> float:
    g = _labels(gt)
    return float(((g != 0) & (g != IGNORE)).mean())


def stratum(ratio: float, cuts: Sequence[float] = DEFAULT_STRATA_CUTS) -> str:
    for name, cut in zip(STRATA, cuts):
        if ratio < cut:
            return name
    return STRATA[-1]


def size_stratified_miou(pairs: Iterable[tuple], num_classes: int,
                         cuts: Sequence[float] = DEFAULT_STRATA_CUTS,
                         include_background: bool = True) -> dict[str, float | None]:
    """mIoU per object-size stratum, by foreground area ratio of the gt."""
    cuts = tuple(cuts)
    if len(cuts) != 3 or not all(0 < a < b < 1 for a, b in zip(cuts, cuts[1:])) or not 0 < cuts[0]:
        raise ValueError(f"need 3 ascending cut points in (0, 1), got {cuts}")
    accs = {s: ConfusionAccumulator(num_classes) for s in STRATA}
    for pred, gt in pairs:
        accs[stratum(foreground_ratio(gt), cuts)].accumulate(pred, gt)
    return {s: (compute_iou(a, include_background)[1] if a.total else None)
            for s, a in accs.items()}


def threshold_background(soft: np.ndarray, t: float) -> np.ndarray:
    """Labels from ``H x W x C`` foreground scores: argmax + 1, or 0 where the max is below ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {t}")
    soft = np.asarray(soft)
    labels = soft.argmax(axis=-1).astype(np.uint8) + 1
    labels[soft.max(axis=-1) < t] = 0
    return labels


def sweep_threshold(softs: Sequence[np.ndarray], gts: Sequence, grid: Sequence[float] = DEFAULT_GRID,
                    include_background: bool = True) -> tuple[float, list[tuple[float, float]]]:
    """mIoU at every threshold of ``grid``; the best threshold (smallest on ties) and the curve."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty threshold grid")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be ascending")
    num_classes = np.asarray(softs[0]).shape[-1] + 1
    curve = []
    best_t, best = grid[0], -np.inf
    for t in grid:
        acc = ConfusionAccumulator(num_classes)
        for soft, gt in zip(softs, gts):
            acc.accumulate(threshold_background(soft, t), gt)
        miou = compute_iou(acc, include_background)[1]
        curve.append((t, miou))
        if miou > best:
            best_t, best = t, miou
    return best_t, curve


def mask_iou(pred, gt, category: int | None = None) -> float | None:
    """Foreground IoU of a binary prediction against a (multi-class) gt, IGNORE excluded.

    With ``category`` set, only that class counts as gt foreground.
    """
    p, g = _labels(pred), _labels(gt)
    valid = g != IGNORE
    pf = (p != 0) & valid
    gf = ((g != 0) if category is None else (g == category)) & valid
    union = (pf | gf).sum()
    return float((pf & gf).sum() / union) if union else None


@dataclass
class EvalReport:
    per_class_iou: list[float | None]
    miou: float
    strata_miou: dict[str, float | None] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_class_iou": self.per_class_iou, "miou": self.miou,
                "strata_miou": self.strata_miou, "config": self.config}


def write_json(obj, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
