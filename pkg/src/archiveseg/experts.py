"""Per-category (or per-group) binary experts that re-segment their archives."""

from __future__ import annotations

import logging
import os
from typing import Mapping, Sequence

import numpy as np

from .datamodel import Archive, LabelMask, Provenance, PseudoLabelRecord
from .distill import TrainConfig, fit, predict_probs
from .models import TrainedSegmenter
from .pseudomask import UnusableArchiveError, is_flagged
from .retrieval import ExpertGroup

log = logging.getLogger(__name__)

MIN_FOREGROUND_FRACTION = 0.005


class DegenerateSupervisionError(ValueError):
    pass


def train_expert(group: ExpertGroup, records: Sequence[PseudoLabelRecord], config: TrainConfig,
                 images: Mapping[str, np.ndarray], log_path: str | os.PathLike | None = None,
                 min_foreground: float = MIN_FOREGROUND_FRACTION) -> TrainedSegmenter:
    """Foreground-vs-background segmenter on the union of the group's pseudo-labels."""
    members = set(group.member_category_indices)
    strays = {r.category_index for r in records} - members
    if strays:
        raise ValueError(f"group {group.group_id} got records of categories {sorted(strays)}")
    if not records:
        raise DegenerateSupervisionError(f"group {group.group_id}: no records")
    fg = float(np.mean([r.mask.foreground_fraction() for r in records]))
    if fg < min_foreground:
        raise DegenerateSupervisionError(
            f"group {group.group_id}: mean foreground fraction {fg:.4f} below {min_foreground} "
            f"over {len(records)} records")
    samples = [(images[r.image_id], r.mask.labels) for r in records]
    seg = fit(samples, 2, config, log_path, desc=f"expert[{group.group_id}]")
    seg.metadata.update(group_id=group.group_id, members=sorted(members),
                        mean_foreground=fg)
    return seg


def predict_masks(expert: TrainedSegmenter, pixels: Sequence[np.ndarray],
                  batch_size: int = 64) -> list[LabelMask]:
    """Binary argmax masks; same-sized images are batched together."""
    out: list[LabelMask | None] = [None] * len(pixels)
    by_shape: dict[tuple, list[int]] = {}
    for i, px in enumerate(pixels):
        by_shape.setdefault(px.shape, []).append(i)
    for idx in by_shape.values():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            probs = predict_probs(expert, np.stack([pixels[i] for i in chunk]))
            for i, p in zip(chunk, probs):
                out[i] = LabelMask.binary(p.argmax(axis=2))
    return out


def refine_masks(expert: TrainedSegmenter, archive: Archive,
                 images: Mapping[str, np.ndarray]) -> list[PseudoLabelRecord]:
    """Expert predictions as pseudo-labels for the archive's category (empty ones skipped)."""
    members = expert.metadata.get("members")
    if members is not None and archive.category_index not in members:
        raise ValueError(f"expert for group {expert.metadata.get('group_id')} was not trained "
                         f"on category {archive.category_index}")
    masks = predict_masks(expert, [images[i] for i in archive.image_ids])
    records = [PseudoLabelRecord(i, m, archive.category_index, Provenance.EXPERT)
               for i, m in zip(archive.image_ids, masks) if not is_flagged(m)]
    skipped = len(archive) - len(records)
    if skipped:
        log.info("category %d: %d empty expert predictions skipped", archive.category_index, skipped)
    if not records:
        raise UnusableArchiveError(
            f"archive for category {archive.category_index}: every expert mask is empty")
    return records
