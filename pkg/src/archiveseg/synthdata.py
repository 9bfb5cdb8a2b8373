"""Deterministic synthetic shapes dataset and oracle providers.

Each category is a (hue, shape) pair. The image-embedding oracle only looks
at colour and the saliency oracle only looks at colour contrast (saturation),
so "naming" and "grouping" come from independent cues.
"""

from __future__ import annotations

import logging
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .datamodel import (IGNORE, Category, CategoryCatalog, EmbeddingVector,
                        ImageSample, LabelMask, ManifestRecord, write_image, write_manifest,
                        write_mask)

log = logging.getLogger(__name__)

# named hues at 15 degree steps
PALETTE = (
    "red", "vermilion", "orange", "amber", "yellow", "lime", "chartreuse", "harlequin",
    "green", "emerald", "spring", "aquamarine", "cyan", "capri", "azure", "cobalt",
    "blue", "indigo", "violet", "purple", "magenta", "cerise", "rose", "crimson",
)
SHAPES = ("square", "circle", "triangle", "diamond", "cross", "hexagon", "star", "ellipse")

EMBED_DIM = 16
_KAPPA = 8.0
_SATURATION_THRESHOLD = 0.25
_MAX_TRIES = 100
_MAX_LAYOUTS = 20


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    num_categories: int = 8
    images_per_category: int = 200
    image_size: tuple[int, int] = (48, 48)
    multi_object: bool = True
    objects_per_image: tuple[int, int] = (2, 3)
    background_texture: str = "noise"
    boundary_ignore_width: int = 1
    seed: int = 0
    # foreground area ratio of single-object images, and of each object in multi-object ones
    fg_fraction: tuple[float, float] = (0.08, 0.35)
    multi_fg_fraction: tuple[float, float] = (0.04, 0.12)
    val_images_per_category: int = 10
    multi_val_images: int = 80
    hue_noise: float = 14.0  # per-pixel hue std, degrees
    hue_jitter: float = 5.0  # per-image hue offset bound, degrees
    # single-object backgrounds follow their category (multi-object: a random category's)
    scene_context: bool = True

    def __post_init__(self) -> None:
        if self.num_categories < 1 or self.images_per_category < 1:
            raise ValueError("num_categories and images_per_category must be >= 1")
        if self.num_categories > 360:
            raise ValueError("at most 360 categories (one hue per degree)")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        if self.multi_object and hi > self.num_categories:
            raise ValueError("multi-object images need distinct categories: "
                             f"objects_per_image {hi} > num_categories {self.num_categories}")
        if self.background_texture not in ("flat", "noise"):
            raise ValueError(f"unknown background_texture {self.background_texture!r}")
        if self.boundary_ignore_width < 0:
            raise ValueError("boundary_ignore_width must be >= 0")
        for rng in (self.fg_fraction, self.multi_fg_fraction):
            if not 0 < rng[0] <= rng[1] < 1:
                raise ValueError(f"bad foreground fraction range {rng}")

    def category_hue(self, c: int) -> float:
        """Hue in degrees of 0-based category ``c``."""
        return category_hue(c, self.num_categories)

    def category_name(self, c: int) -> str:
        return f"{hue_name(self.category_hue(c))}-{SHAPES[c % len(SHAPES)]}"

    def catalog(self) -> CategoryCatalog:
        return CategoryCatalog(Category(self.category_name(c)) for c in range(self.num_categories))


@dataclass(frozen=True)
class SaliencyNoiseSpec:
    radius: int = 0
    speckle: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if not 0.0 <= self.speckle <= 1.0:
            raise ValueError("speckle probability must be in [0, 1]")


def category_hue(c: int, n: int) -> float:
    hue = 360.0 * c / n
    if n <= len(PALETTE):
        hue = 15.0 * round(hue / 15.0)
    return hue % 360.0


def hue_name(hue: float) -> str:
    if abs(hue / 15.0 - round(hue / 15.0)) < 1e-9:
        return PALETTE[int(round(hue / 15.0)) % len(PALETTE)]
    return f"hue{hue:g}"


def parse_hue(name: str) -> float | None:
    """Hue (degrees) encoded in a synthetic category name, or None."""
    head = name.strip().lower().split("-")[0]
    if head in PALETTE:
        return 15.0 * PALETTE.index(head)
    m = re.fullmatch(r"hue(\d+(?:\.\d+)?)", head)
    return float(m.group(1)) % 360.0 if m else None


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, half: float, cy: float, cx: float, hw: tuple[int, int]) -> np.ndarray:
    yy, xx = np.mgrid[0:hw[0], 0:hw[1]].astype(np.float64)
    dy = (yy + 0.5 - cy) / half
    dx = (xx + 0.5 - cx) / half
    if shape == "square":
        return (np.abs(dy) <= 1) & (np.abs(dx) <= 1)
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= 1
    if shape == "triangle":
        return (dy <= 1) & (dy >= -1) & (np.abs(dx) <= (dy + 1) / 2)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1
    if shape == "cross":
        return ((np.abs(dy) <= 1) & (np.abs(dx) <= 0.4)) | ((np.abs(dx) <= 1) & (np.abs(dy) <= 0.4))
    if shape == "hexagon":
        return (np.abs(dy) <= 0.866) & (np.abs(dx) + 0.577 * np.abs(dy) <= 1)
    if shape == "star":
        r = np.hypot(dy, dx)
        theta = np.arctan2(dy, dx)
        return r <= 0.6 + 0.4 * np.cos(5 * theta) ** 2
    if shape == "ellipse":
        return (dy / 0.6) ** 2 + dx ** 2 <= 1
    raise ValueError(f"unknown shape {shape!r}")


def _place_object(rng, shape, frac_range, hw, taken: list[tuple[int, int, int, int]]):
    """Sample a shape mask with area ratio inside ``frac_range`` whose bbox avoids ``taken``."""
    h, w = hw
    for _ in range(_MAX_TRIES):
        frac = rng.uniform(*frac_range)
        half = 0.5 * np.sqrt(frac * h * w / _SHAPE_AREA[shape])
        if 2 * half + 2 > min(h, w):
            continue
        cy = rng.uniform(half + 1, h - half - 1)
        cx = rng.uniform(half + 1, w - half - 1)
        mask = _shape_mask(shape, half, cy, cx, hw)
        area = mask.mean()
        if not frac_range[0] <= area <= frac_range[1]:
            continue
        ys, xs = np.nonzero(mask)
        box = (ys.min() - 1, xs.min() - 1, ys.max() + 1, xs.max() + 1)
        if any(box[0] <= t[2] and t[0] <= box[2] and box[1] <= t[3] and t[1] <= box[3]
               for t in taken):
            continue
        return mask, box
    raise SynthError(f"could not place a {shape} with area ratio in {frac_range} "
                     f"after {_MAX_TRIES} tries")


_SHAPE_AREA = {s: float(_shape_mask(s, 100.0, 100.0, 100.0, (200, 200)).mean())
               for s in SHAPES}


def _context(c: int, n: int) -> tuple[float, float]:
    """Background (gray level, texture blur) typical of 0-based category ``c``."""
    slot = (3 * c) % n if n % 3 else c
    level = 0.2 + 0.6 * slot / max(n - 1, 1)
    blur = 0.6 if c % 2 == 0 else 2.0
    return level, blur


def _background(rng, spec: SynthSpec, context: int | None) -> np.ndarray:
    h, w = spec.image_size
    if context is None:
        level, blur = rng.uniform(0.2, 0.8), 1.0
    else:
        level, blur = _context(context, spec.num_categories)
        level += rng.uniform(-0.03, 0.03)
    gray = np.full((h, w), level)
    if spec.background_texture == "noise":
        gray = gray + ndimage.gaussian_filter(rng.normal(0.0, 0.12 * (1 + blur), (h, w)), blur)
    gray = np.clip(gray, 0.0, 1.0)
    return np.repeat(gray[:, :, None], 3, axis=2)


def _paint(rng, pixels: np.ndarray, mask: np.ndarray, hue: float, spec: SynthSpec) -> None:
    n = int(mask.sum())
    h = (hue + rng.uniform(-spec.hue_jitter, spec.hue_jitter)
         + rng.normal(0.0, spec.hue_noise, n)) % 360.0
    s = np.full(n, rng.uniform(0.55, 1.0))
    v = np.clip(rng.uniform(0.55, 1.0) + rng.normal(0.0, 0.05, n), 0.35, 1.0)
    pixels[mask] = hsv_to_rgb(np.stack([h / 360.0, s, v], axis=1))


def _boundary(mask: np.ndarray, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros_like(mask)
    inner = ndimage.binary_erosion(mask, structure=np.ones((2 * width + 1,) * 2), border_value=1)
    return mask & ~inner


def render_image(rng, spec: SynthSpec, categories: list[int], single: bool):
    """Render one image holding the given 0-based categories; returns (pixels, labels)."""
    for attempt in range(_MAX_LAYOUTS):
        try:
            return _render(rng, spec, categories, single)
        except SynthError:
            if attempt == _MAX_LAYOUTS - 1:
                raise


def _render(rng, spec, categories, single):
    if not spec.scene_context:
        context = None
    elif single:
        context = categories[0]
    else:
        context = int(rng.integers(spec.num_categories))
    pixels = _background(rng, spec, context)
    labels = np.zeros(spec.image_size, dtype=np.uint8)
    taken: list[tuple[int, int, int, int]] = []
    frac = spec.fg_fraction if single else spec.multi_fg_fraction
    for c in categories:
        mask, box = _place_object(rng, SHAPES[c % len(SHAPES)], frac, spec.image_size, taken)
        taken.append(box)
        _paint(rng, pixels, mask, spec.category_hue(c), spec)
        labels[mask] = c + 1
        labels[_boundary(mask, spec.boundary_ignore_width)] = IGNORE
    return pixels, labels


def _record_rng(seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, split, index])


def generate_dataset(spec: SynthSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write images, gt masks, catalog and manifests under ``out_dir``.

    Returns a mapping from split name (``train``, ``val_single`` and, when
    ``multi_object``, ``val_multi``) plus ``catalog`` to the written files.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    catalog = spec.catalog()
    catalog.dump(out / "catalog.txt")
    paths = {"catalog": out / "catalog.txt"}

    def emit(split: str, code: int, jobs: list[list[int]], single: bool) -> None:
        records = []
        for i, cats in enumerate(jobs):
            rng = _record_rng(spec.seed, code, i)
            pixels, labels = render_image(rng, spec, cats, single)
            rid = f"{split}-{i:05d}"
            img_path = out / "images" / f"{rid}.png"
            mask_path = out / "masks" / f"{rid}.png"
            write_image(pixels, img_path)
            write_mask(LabelMask(labels, catalog.num_classes), mask_path)
            category = catalog.names[cats[0]] if single else None
            records.append(ManifestRecord(rid, img_path, mask_path, category))
        write_manifest(records, out / f"{split}.jsonl")
        paths[split] = out / f"{split}.jsonl"
        log.info("synth: wrote %d %s records", len(records), split)

    n = spec.num_categories
    emit("train", 0, [[i % n] for i in range(n * spec.images_per_category)], True)
    emit("val_single", 1, [[i % n] for i in range(n * spec.val_images_per_category)], True)
    if spec.multi_object:
        jobs = []
        for i in range(spec.multi_val_images):
            rng = _record_rng(spec.seed, 3, i)
            k = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
            jobs.append(sorted(rng.choice(n, size=k, replace=False).tolist()))
        emit("val_multi", 2, jobs, False)
    return paths


# ---------------------------------------------------------------------------
# oracle providers


def _hue_code(hue_deg: np.ndarray) -> np.ndarray:
    centers = np.arange(EMBED_DIM) * (2 * np.pi / EMBED_DIM)
    theta = np.deg2rad(np.asarray(hue_deg, dtype=np.float64))[..., None]
    return np.exp(_KAPPA * (np.cos(theta - centers) - 1.0))


def saturation(pixels: np.ndarray) -> np.ndarray:
    return rgb_to_hsv(np.clip(pixels, 0.0, 1.0))[..., 1]


def oracle_image_embedding(image: ImageSample | np.ndarray) -> EmbeddingVector:
    """Saturation-weighted soft hue histogram, L2-normalised."""
    pixels = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    hsv = rgb_to_hsv(np.clip(pixels, 0.0, 1.0)).reshape(-1, 3)
    weight = hsv[:, 1] * hsv[:, 2]
    vec = (_hue_code(hsv[:, 0] * 360.0) * weight[:, None]).sum(axis=0)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        # achromatic image: fixed direction
        vec, norm = np.ones(EMBED_DIM), np.sqrt(EMBED_DIM)
    return EmbeddingVector(vec / norm, normalized=True)


class OracleEmbeddingProvider:
    """Stand-in image/text encoder pair for synthetic categories.

    Text is resolved to a category by the longest catalog name or alias it
    contains; the category's hue (parsed from its name) gives the vector.
    Stateless, so safe for concurrent use.
    """

    dim = EMBED_DIM

    def __init__(self, catalog: CategoryCatalog):
        self.catalog = catalog
        keys = []
        for i, cat in enumerate(catalog, start=1):
            keys.append((cat.name.lower(), i))
            if cat.retrieval_alias:
                keys.append((cat.retrieval_alias.lower(), i))
        self._keys = sorted(keys, key=lambda kv: -len(kv[0]))

    def image_embed(self, image: ImageSample) -> EmbeddingVector:
        return oracle_image_embedding(image)

    def text_embed(self, text: str) -> EmbeddingVector:
        low = text.lower()
        for key, index in self._keys:
            if key in low:
                return oracle_text_embedding(self.catalog[index].name)
        raise ValueError(f"oracle text encoder: no known category in {text!r}")


def oracle_text_embedding(category_name: str, catalog: CategoryCatalog | None = None) -> EmbeddingVector:
    """Canonical hue vector of a synthetic category (alias-aware when a catalog is given)."""
    name = category_name
    if catalog is not None:
        name = catalog[catalog.index(category_name)].name
    hue = parse_hue(name)
    if hue is None:
        raise ValueError(f"not a synthetic category name: {category_name!r}")
    vec = _hue_code(hue)
    return EmbeddingVector(vec / np.linalg.norm(vec), normalized=True)


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return yy ** 2 + xx ** 2 <= radius ** 2


def corrupt_mask(mask: np.ndarray, noise: SaliencyNoiseSpec, key: str) -> np.ndarray:
    """Dilate or erode (coin flip) by ``noise.radius`` then flip pixels with prob ``noise.speckle``."""
    rng = np.random.default_rng([noise.seed, zlib.crc32(key.encode())])
    out = mask.astype(bool)
    if noise.radius > 0:
        op = ndimage.binary_dilation if rng.random() < 0.5 else ndimage.binary_erosion
        out = op(out, structure=_disk(noise.radius))
    if noise.speckle > 0:
        out = out ^ (rng.random(out.shape) < noise.speckle)
    return out


def oracle_saliency(image: ImageSample, noise: SaliencyNoiseSpec | None = None) -> LabelMask:
    """Foreground = saturated pixels; optionally corrupted deterministically per image id."""
    mask = saturation(image.pixels) > _SATURATION_THRESHOLD
    if noise is not None and (noise.radius > 0 or noise.speckle > 0):
        mask = corrupt_mask(mask, noise, image.id)
    return LabelMask.binary(mask)


class OracleSaliencyProvider:
    """Stateless; safe for concurrent use."""

    def __init__(self, noise: SaliencyNoiseSpec | None = None):
        self.noise = noise

    def predict(self, image: ImageSample) -> LabelMask:
        return oracle_saliency(image, self.noise)

