"""Category-agnostic masks for archive images, edge refinement and labelling."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .datamodel import (Archive, CategoryCatalog, DataError, ImageSample, LabelMask,
                        ManifestRecord, Provenance, PseudoLabelRecord, load_manifest, read_mask,
                        write_manifest, write_mask)

log = logging.getLogger(__name__)


class SaliencyProvider(Protocol):
    def predict(self, image: ImageSample) -> LabelMask: ...


class UnusableArchiveError(ValueError):
    pass


def _safe_predict(provider: SaliencyProvider, image: ImageSample) -> LabelMask | None:
    try:
        mask = provider.predict(image)
    except Exception as e:  # provider bugs must not sink a whole archive
        log.warning("saliency provider failed on %s: %s", image.id, e)
        return None
    if mask.shape != image.shape or not mask.is_binary or (mask.labels > 1).any():
        log.warning("saliency provider returned an invalid mask for %s", image.id)
        return None
    return mask


def generate_saliency(archive: Archive, images: Mapping[str, ImageSample],
                      provider: SaliencyProvider, workers: int = 1) -> list[LabelMask | None]:
    """One binary mask per archive entry, in archive order.

    Failed predictions come back as ``None``. With ``workers > 1`` the
    provider is shared across threads and must tolerate concurrent calls;
    wrap it in a lock otherwise.
    """
    missing = [i for i in archive.image_ids if i not in images]
    if missing:
        raise KeyError(f"archive images not found: {missing[:5]}")
    todo = [images[i] for i in archive.image_ids]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            masks = list(pool.map(lambda im: _safe_predict(provider, im), todo))
    else:
        masks = [_safe_predict(provider, im) for im in todo]
    failed = sum(m is None for m in masks)
    empty = sum(m is not None and not m.labels.any() for m in masks)
    if failed or empty:
        log.info("category %d: %d failed, %d empty saliency masks out of %d",
                 archive.category_index, failed, empty, len(masks))
    return masks


def is_flagged(mask: LabelMask | None) -> bool:
    """Failed or empty masks are skipped downstream."""
    return mask is None or not (mask.labels == 1).any()


def _shift(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = arr.shape[:2]
    pad = [(abs(dy), abs(dy)), (abs(dx), abs(dx))] + [(0, 0)] * (arr.ndim - 2)
    padded = np.pad(arr, pad, mode="edge")
    return padded[abs(dy) + dy:abs(dy) + dy + h, abs(dx) + dx:abs(dx) + dx + w]


def refine_edges(image: ImageSample | np.ndarray, mask: LabelMask, strength: float,
                 color_sigma: float = 0.1) -> LabelMask:
    """Edge-aware clean-up of a binary mask.

    Each pixel gets a colour likelihood of being foreground from the mask's
    mean foreground/background colours; that likelihood is averaged over a
    Gaussian window (spatial sigma ``strength``) weighted by colour
    similarity, blended with the input mask by ``strength / (1 + strength)``
    and thresholded at 0.5. ``strength == 0`` returns the input, and a
    uniform image leaves the mask unchanged because the likelihood is flat.
    """
    if strength < 0:
        raise ValueError(f"strength must be >= 0, got {strength}")
    pixels = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    if mask.shape != pixels.shape[:2]:
        raise ValueError(f"mask {mask.shape} and image {pixels.shape[:2]} differ")
    fg = mask.labels == 1
    if strength == 0 or fg.all() or not fg.any():
        return mask
    px = pixels.astype(np.float64)
    mu_f = px[fg].mean(axis=0)
    mu_b = px[~fg].mean(axis=0)
    d_f = ((px - mu_f) ** 2).sum(axis=2)
    d_b = ((px - mu_b) ** 2).sum(axis=2)
    z = np.clip((d_b - d_f) / color_sigma ** 2, -50.0, 50.0)
    like = 1.0 / (1.0 + np.exp(-z))

    radius = min(int(math.ceil(2 * strength)), 10)
    num = np.zeros(fg.shape)
    den = np.zeros(fg.shape)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            spatial = math.exp(-(dy * dy + dx * dx) / (2 * strength ** 2))
            color = np.exp(-((px - _shift(px, dy, dx)) ** 2).sum(axis=2) / (2 * color_sigma ** 2))
            w = spatial * color
            num += w * _shift(like, dy, dx)
            den += w
    alpha = strength / (1.0 + strength)
    blended = (1 - alpha) * fg + alpha * (num / den)
    return LabelMask.binary(blended > 0.5)


def label_archive(archive: Archive, masks: Sequence[LabelMask | None],
                  provenance: Provenance = Provenance.SALIENCY) -> list[PseudoLabelRecord]:
    """Attach the archive's category to every usable mask."""
    if len(masks) != len(archive):
        raise ValueError(f"{len(masks)} masks for an archive of {len(archive)}")
    records = [PseudoLabelRecord(image_id, m, archive.category_index, provenance)
               for image_id, m in zip(archive.image_ids, masks) if not is_flagged(m)]
    if not records:
        raise UnusableArchiveError(
            f"archive for category {archive.category_index}: every mask is empty or failed")
    return records


def save_records(records: Sequence[PseudoLabelRecord], out_dir: str | os.PathLike,
                 image_paths: Mapping[str, os.PathLike], catalog: CategoryCatalog,
                 root: str | os.PathLike | None = None) -> Path:
    """Write masks plus a ``pseudolabels.jsonl`` manifest with a provenance column."""
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for n, rec in enumerate(records):
        key = f"c{rec.category_index:03d}-{rec.image_id}"
        mask_path = out / "masks" / f"{n:06d}.png"
        write_mask(rec.mask, mask_path)
        rows.append(ManifestRecord(key, Path(image_paths[rec.image_id]), mask_path,
                                   catalog[rec.category_index].name,
                                   {"image_id": rec.image_id,
                                    "category_index": rec.category_index,
                                    "provenance": rec.provenance.value}))
    path = out / "pseudolabels.jsonl"
    write_manifest(rows, path, root=root)
    return path


def load_records(path: str | os.PathLike) -> list[PseudoLabelRecord]:
    records = []
    for row in load_manifest(path):
        try:
            image_id = row.extra["image_id"]
            category = int(row.extra["category_index"])
            provenance = Provenance(row.extra["provenance"])
        except (KeyError, ValueError) as e:
            raise DataError(f"{path}: record {row.id!r} lacks pseudo-label fields ({e})") from None
        records.append(PseudoLabelRecord(image_id, read_mask(row.mask_path, 2), category, provenance))
    return records
