"""Training machinery and the final multi-class segmenter.

The same loop trains the binary category experts and the distilled model:
poly-decayed AdamW, pixel-wise cross-entropy that skips ``IGNORE``, random
scale/crop/colour-jitter augmentation and optional copy-paste.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import IGNORE, CategoryCatalog, ImageSample, LabelMask, PseudoLabelRecord
from .models import SegNet, TrainedSegmenter, config_hash

log = logging.getLogger(__name__)

Pair = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.0005
    weight_decay: float = 0.0002
    batch_size: int = 8
    max_iterations: int = 20000
    poly_power: float = 0.9
    copy_paste_enabled: bool = True
    n_max: int = 2
    scale_range: tuple[float, float] = (0.5, 2.0)
    crop_size: tuple[int, int] = (320, 320)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    seed: int = 0
    width: int = 24
    log_every: int = 10

    def __post_init__(self) -> None:
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if self.batch_size < 1 or self.max_iterations < 1:
            raise ValueError("batch_size and max_iterations must be >= 1")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale range must be positive and ordered, got {self.scale_range}")
        if min(self.crop_size) < 1:
            raise ValueError(f"bad crop size {self.crop_size}")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise ValueError("colour jitter magnitudes must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("scale_range", "crop_size"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def poly_lr(iteration: int, config: TrainConfig) -> float:
    """``lr0 * (1 - iteration / max_iterations) ** poly_power``."""
    if not 0 <= iteration <= config.max_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {config.max_iterations}]")
    return config.lr0 * (1.0 - iteration / config.max_iterations) ** config.poly_power


# ---------------------------------------------------------------------------
# augmentation


def copy_paste(base: Pair, donors: Sequence[Pair], rng: np.random.Generator, n_max: int) -> Pair:
    """Paste the foreground of up to ``n_max - 1`` donors onto ``base``.

    ``n`` is drawn uniformly from ``1..n_max``; ``n == 1`` returns ``base``
    untouched, otherwise the first ``n - 1`` donors are pasted in order with
    hard edges, later ones overwriting earlier ones. Donors must already
    match the base's size.
    """
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    n = int(rng.integers(1, n_max + 1))
    if n == 1:
        return base
    if len(donors) < n - 1:
        raise ValueError(f"need {n - 1} donors, got {len(donors)}")
    pixels, labels = base[0].copy(), base[1].copy()
    for i in range(n - 1):
        d_pixels, d_labels = donors[i]
        if d_labels.shape != labels.shape:
            raise ValueError(f"donor shape {d_labels.shape} != base shape {labels.shape}")
        fg = (d_labels != 0) & (d_labels != IGNORE)
        pixels[fg] = d_pixels[fg]
        labels[fg] = d_labels[fg]
    return pixels, labels


def rescale(pixels: np.ndarray, labels: np.ndarray, scale: float) -> Pair:
    """Bilinear for pixels, nearest-neighbour for labels."""
    if scale == 1.0:
        return pixels, labels
    h, w = labels.shape
    size = (max(1, round(w * scale)), max(1, round(h * scale)))
    return (cv2.resize(pixels, size, interpolation=cv2.INTER_LINEAR),
            cv2.resize(labels, size, interpolation=cv2.INTER_NEAREST))


def crop_or_pad(pixels: np.ndarray, labels: np.ndarray, size: tuple[int, int],
                offset: tuple[int, int]) -> Pair:
    """Window of ``size`` at ``offset`` (may be negative); outside pixels are 0 / IGNORE."""
    ch, cw = size
    h, w = labels.shape
    out_px = np.zeros((ch, cw, 3), dtype=pixels.dtype)
    out_lb = np.full((ch, cw), IGNORE, dtype=labels.dtype)
    top, left = offset
    y0, y1 = max(top, 0), min(top + ch, h)
    x0, x1 = max(left, 0), min(left + cw, w)
    if y1 > y0 and x1 > x0:
        out_px[y0 - top:y1 - top, x0 - left:x1 - left] = pixels[y0:y1, x0:x1]
        out_lb[y0 - top:y1 - top, x0 - left:x1 - left] = labels[y0:y1, x0:x1]
    return out_px, out_lb


def _offset(rng, full: int, crop: int) -> int:
    if full >= crop:
        return int(rng.integers(0, full - crop + 1))
    return -int(rng.integers(0, crop - full + 1))


def color_jitter(pixels: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    out = pixels
    if config.brightness > 0:
        out = out * rng.uniform(1 - config.brightness, 1 + config.brightness)
    if config.contrast > 0:
        mean = out.mean()
        out = (out - mean) * rng.uniform(1 - config.contrast, 1 + config.contrast) + mean
    if config.saturation > 0:
        gray = out.mean(axis=2, keepdims=True)
        out = (out - gray) * rng.uniform(1 - config.saturation, 1 + config.saturation) + gray
    if out is pixels:
        return pixels
    return np.clip(out, 0.0, 1.0).astype(pixels.dtype)


def augment(pixels: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
            config: TrainConfig) -> Pair:
    """Random scale, random crop (IGNORE-padded) and colour jitter of the image only."""
    lo, hi = config.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else lo
    pixels, labels = rescale(pixels, labels, scale)
    h, w = labels.shape
    ch, cw = config.crop_size
    pixels, labels = crop_or_pad(pixels, labels, (ch, cw), (_offset(rng, h, ch), _offset(rng, w, cw)))
    return color_jitter(pixels, rng, config), labels


class _LazyDonors(Sequence):
    """Donors drawn uniformly from the corpus and augmented only when used."""

    def __init__(self, samples: Sequence[Pair], rng, config: TrainConfig, count: int):
        self._samples, self._rng, self._config, self._count = samples, rng, config, count
        self._cache: list[Pair] = []

    def __len__(self):
        return self._count

    def __getitem__(self, i):
        if not 0 <= i < self._count:
            raise IndexError(i)
        while len(self._cache) <= i:
            idx = int(self._rng.integers(len(self._samples)))
            self._cache.append(augment(*self._samples[idx], self._rng, self._config))
        return self._cache[i]


def make_batch(samples: Sequence[Pair], iteration: int, config: TrainConfig) -> Pair:
    """Batch for one iteration; item ``b`` uses RNG stream ``(seed, iteration, b)``."""
    images, targets = [], []
    for b in range(config.batch_size):
        rng = np.random.default_rng([config.seed, iteration, b])
        pair = augment(*samples[int(rng.integers(len(samples)))], rng, config)
        if config.copy_paste_enabled and config.n_max > 1:
            pair = copy_paste(pair, _LazyDonors(samples, rng, config, config.n_max - 1), rng,
                              config.n_max)
        images.append(pair[0])
        targets.append(pair[1])
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float().contiguous()
    y = torch.from_numpy(np.stack(targets).astype(np.int64))
    return x, y


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over non-IGNORE pixels (zero if there are none)."""
    if not (target != IGNORE).any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits, target, ignore_index=IGNORE)


# ---------------------------------------------------------------------------
# training / inference


def fit(samples: Sequence[Pair], num_classes: int, config: TrainConfig,
        log_path: str | os.PathLike | None = None, desc: str = "train") -> TrainedSegmenter:
    """Train a fresh :class:`SegNet`; deterministic for a fixed sample order and config."""
    if not samples:
        raise ValueError("no training samples")
    torch.manual_seed(config.seed)
    model = SegNet(num_classes, config.width)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr0,
                                  weight_decay=config.weight_decay)
    history = []
    log_file = open(log_path, "a") if log_path is not None else None
    model.train()
    try:
        for it in range(config.max_iterations):
            lr = poly_lr(it, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            x, y = make_batch(samples, it, config)
            loss = segmentation_loss(model(x), y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.detach())
            history.append(value)
            if it % config.log_every == 0 or it == config.max_iterations - 1:
                line = {"iteration": it, "lr": lr, "loss": value}
                if log_file is not None:
                    log_file.write(json.dumps(line) + "\n")
                log.debug("%s %s", desc, line)
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    tail = history[-max(1, len(history) // 20):]
    meta = {"config_hash": config_hash(config.to_dict()), "seed": config.seed,
            "iterations": config.max_iterations, "initial_loss": history[0],
            "final_loss": float(np.mean(tail)), "num_samples": len(samples)}
    return TrainedSegmenter(model, num_classes, meta, config.width)


def train_distilled(corpus: Sequence[PseudoLabelRecord], catalog: CategoryCatalog,
                    config: TrainConfig, images: Mapping[str, np.ndarray],
                    log_path: str | os.PathLike | None = None) -> TrainedSegmenter:
    """(C+1)-way segmenter on the union of category pseudo-labels."""
    if not corpus:
        raise ValueError("empty pseudo-label corpus")
    for rec in corpus:
        if rec.category_index > len(catalog):
            raise ValueError(f"record {rec.image_id!r} has category {rec.category_index} "
                             f"missing from the {len(catalog)}-category catalog")
    samples = [(images[r.image_id], r.class_labels()) for r in corpus]
    seg = fit(samples, catalog.num_classes, config, log_path, desc="distill")
    seg.metadata["categories"] = catalog.names
    return seg


@dataclass(frozen=True)
class ResizePolicy:
    """``none`` keeps the input size; ``long_side`` scales the larger side to ``size``;
    ``short_side`` scales the shorter side to ``size`` capped by ``max_size``."""

    mode: str = "none"
    size: int = 1024
    max_size: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("none", "long_side", "short_side"):
            raise ValueError(f"unknown resize mode {self.mode!r}")

    def target(self, h: int, w: int) -> tuple[int, int]:
        if self.mode == "none":
            return h, w
        if self.mode == "long_side":
            scale = self.size / max(h, w)
        else:
            scale = self.size / min(h, w)
            if self.max_size is not None and max(h, w) * scale > self.max_size:
                scale = self.max_size / max(h, w)
        return max(1, round(h * scale)), max(1, round(w * scale))


IMAGENET_S_POLICY = ResizePolicy("long_side", 1024)


@torch.no_grad()
def predict_probs(model: TrainedSegmenter, pixels: np.ndarray,
                  resize_policy: ResizePolicy = ResizePolicy()) -> np.ndarray:
    """Softmax scores ``H x W x K`` at the input's original resolution."""
    batch = pixels[None] if pixels.ndim == 3 else pixels
    n, h, w, _ = batch.shape
    x = torch.from_numpy(np.array(batch, dtype=np.float32)).permute(0, 3, 1, 2)
    th, tw = resize_policy.target(h, w)
    if (th, tw) != (h, w):
        x = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)
    model.model.eval()
    probs = torch.softmax(model.model(x), dim=1)
    if (th, tw) != (h, w):
        probs = F.interpolate(probs, size=(h, w), mode="bilinear", align_corners=False)
    if probs.shape[2:] != (h, w):
        raise RuntimeError(f"prediction size {tuple(probs.shape[2:])} != input size {(h, w)}")
    out = probs.permute(0, 2, 3, 1).numpy()
    return out[0] if pixels.ndim == 3 else out


def predict(model: TrainedSegmenter, image: ImageSample | np.ndarray,
            resize_policy: ResizePolicy = ResizePolicy()) -> tuple[LabelMask, np.ndarray]:
    """Hard labels (argmax) and soft scores for one image."""
    pixels = image.pixels if isinstance(image, ImageSample) else np.asarray(image, np.float32)
    soft = predict_probs(model, pixels, resize_policy)
    return LabelMask(soft.argmax(axis=2).astype(np.uint8), model.num_output_classes), soft
