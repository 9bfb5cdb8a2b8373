"""Core domain types and the on-disk formats shared by every stage.

Conventions:
- label 0 is background, foreground categories start at 1;
- ``IGNORE`` (255) marks pixels excluded from losses and metrics;
- masks are single-channel 8-bit PNGs, manifests are JSON-lines files whose
  paths are relative to the manifest's own directory.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

IGNORE = 255


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Category:
    name: str
    retrieval_alias: str | None = None

    @property
    def query(self) -> str:
        """Text used for retrieval prompts."""
        return self.retrieval_alias or self.name


class CategoryCatalog:
    """Ordered foreground categories; index 0 is the implicit background."""

    def __init__(self, categories: Iterable[Category | str]):
        cats = tuple(c if isinstance(c, Category) else Category(c) for c in categories)
        seen: set[str] = set()
        aliases: set[str] = set()
        for cat in cats:
            key = cat.name.strip().lower()
            if not key:
                raise DataError("category names must be non-empty")
            if key == "background":
                raise DataError("'background' is reserved for index 0")
            if key in seen:
                raise DataError(f"duplicate category name: {cat.name!r}")
            seen.add(key)
            if cat.retrieval_alias is not None:
                alias = cat.retrieval_alias.strip()
                if not alias:
                    raise DataError(f"empty retrieval alias for {cat.name!r}")
                if alias.lower() in aliases:
                    raise DataError(f"duplicate retrieval alias: {alias!r}")
                aliases.add(alias.lower())
        self.categories = cats
        self._index = {c.name.lower(): i + 1 for i, c in enumerate(cats)}
        self._alias_index = {
            c.retrieval_alias.lower(): i + 1 for i, c in enumerate(cats) if c.retrieval_alias
        }

    def __len__(self) -> int:
        return len(self.categories)

    def __iter__(self):
        return iter(self.categories)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CategoryCatalog) and self.categories == other.categories

    @property
    def num_classes(self) -> int:
        return len(self.categories) + 1

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.categories]

    def index(self, name: str) -> int:
        """1-based index of a category, looked up by name or alias (case-insensitive)."""
        key = name.strip().lower()
        if key in self._index:
            return self._index[key]
        if key in self._alias_index:
            return self._alias_index[key]
        raise KeyError(name)

    def __getitem__(self, index: int) -> Category:
        if not 1 <= index <= len(self.categories):
            raise IndexError(f"category index {index} outside 1..{len(self.categories)}")
        return self.categories[index - 1]

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CategoryCatalog":
        """Read a catalog file: one ``name`` or ``name|alias`` per line, ``#`` comments."""
        cats = []
        with open(path) as f:
            for raw in f:
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                name, sep, alias = line.partition("|")
                cats.append(Category(name.strip(), alias.strip() if sep else None))
        return cls(cats)

    def dump(self, path: str | os.PathLike) -> None:
        lines = [c.name if c.retrieval_alias is None else f"{c.name}|{c.retrieval_alias}"
                 for c in self.categories]
        Path(path).write_text("\n".join(lines) + "\n")


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Per-pixel integer labels in ``0..num_classes-1`` plus ``IGNORE``."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DataError(f"label mask must be 2-D, got shape {labels.shape}")
        if not 1 <= self.num_classes <= IGNORE:
            raise DataError(f"num_classes must be in 1..255, got {self.num_classes}")
        bad = (labels != IGNORE) & ((labels < 0) | (labels >= self.num_classes))
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise DataError(
                f"label {labels[y, x]} at (row={y}, col={x}) out of range for "
                f"{self.num_classes} classes")
        object.__setattr__(self, "labels", _readonly(labels.astype(np.uint8)))

    @classmethod
    def binary(cls, mask: np.ndarray) -> "LabelMask":
        return cls(np.asarray(mask).astype(np.uint8), 2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def is_binary(self) -> bool:
        return self.num_classes == 2

    def foreground_fraction(self) -> float:
        return float(((self.labels != 0) & (self.labels != IGNORE)).mean())

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, LabelMask) and self.num_classes == other.num_classes
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True, eq=False)
class ImageSample:
    """RGB image as ``H x W x 3`` float32 values in [0, 1]."""

    id: str
    pixels: np.ndarray
    gt_mask: LabelMask | None = None

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise DataError(f"image {self.id!r}: expected H x W x 3 pixels, got {pixels.shape}")
        object.__setattr__(self, "pixels", _readonly(np.clip(pixels, 0.0, 1.0)))
        if self.gt_mask is not None and self.gt_mask.shape != pixels.shape[:2]:
            raise DataError(
                f"image {self.id!r}: gt mask {self.gt_mask.shape} != image {pixels.shape[:2]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DataError(f"embedding must be 1-D, got shape {values.shape}")
        if self.normalized and abs(np.linalg.norm(values) - 1.0) > 1e-6:
            raise DataError(f"embedding flagged normalized has norm {np.linalg.norm(values)}")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def normalize(self) -> "EmbeddingVector":
        norm = np.linalg.norm(self.values)
        if norm < 1e-12:
            raise DataError("cannot normalize a zero embedding")
        return EmbeddingVector(self.values / norm, normalized=True)


@dataclass(frozen=True)
class Archive:
    """Images retrieved for one category, most similar first."""

    category_index: int
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        if self.category_index < 1:
            raise DataError(f"archive category index must be >= 1, got {self.category_index}")
        entries = tuple((str(i), float(s)) for i, s in self.entries)
        ids = [i for i, _ in entries]
        if len(set(ids)) != len(ids):
            raise DataError("archive image ids must be unique")
        scores = [s for _, s in entries]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise DataError("archive similarities must be non-increasing")
        object.__setattr__(self, "entries", entries)

    @property
    def image_ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> dict:
        return {"category_index": self.category_index,
                "entries": [[i, s] for i, s in self.entries]}

    @classmethod
    def from_json(cls, obj: dict) -> "Archive":
        return cls(int(obj["category_index"]), tuple((i, s) for i, s in obj["entries"]))


class Provenance(str, enum.Enum):
    SALIENCY = "saliency"
    EXPERT = "expert"


@dataclass(frozen=True)
class PseudoLabelRecord:
    image_id: str
    mask: LabelMask
    category_index: int
    provenance: Provenance

    def __post_init__(self) -> None:
        if not self.mask.is_binary:
            raise DataError(f"pseudo-label for {self.image_id!r} must be a binary mask")
        if self.category_index < 1:
            raise DataError(f"pseudo-label category index must be >= 1, got {self.category_index}")
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    def class_labels(self) -> np.ndarray:
        """Multi-class label map: foreground pixels carry the category index."""
        labels = self.mask.labels
        return np.where(labels == 1, self.category_index, labels).astype(np.uint8)


# ---------------------------------------------------------------------------
# files


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(pixels: np.ndarray, path: str | os.PathLike) -> None:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_mask(path: str | os.PathLike, num_classes: int = 255) -> LabelMask:
    """Load a single-channel 8-bit mask; values must be < num_classes or IGNORE."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DataError(f"{path}: expected a single-channel 8-bit mask, got mode {im.mode}")
        labels = np.asarray(im, dtype=np.uint8)
    try:
        return LabelMask(labels, num_classes)
    except DataError as e:
        raise DataError(f"{path}: {e}") from None


def write_mask(mask: LabelMask, path: str | os.PathLike) -> None:
    Image.fromarray(np.ascontiguousarray(mask.labels), mode="L").save(path, format="PNG")


@dataclass(frozen=True)
class ManifestRecord:
    """One manifest line; paths are absolute after loading."""

    id: str
    image_path: Path
    mask_path: Path | None = None
    category: str | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def load(self, num_classes: int = 255) -> ImageSample:
        gt = read_mask(self.mask_path, num_classes) if self.mask_path is not None else None
        return ImageSample(self.id, read_image(self.image_path), gt)


_MANIFEST_KEYS = {"id", "image_path", "mask_path", "category"}


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> list[ManifestRecord]:
    """Read a JSON-lines manifest; fields ``id``, ``image_path``, ``mask_path?``, ``category?``.

    Unknown keys are kept in ``extra``. Relative paths resolve against the
    manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent.resolve()
    records = []
    ids: set[str] = set()
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{where}: malformed record ({e.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{where}: record must be a JSON object")
            if not obj.get("id"):
                raise DataError(f"{where}: record missing 'id'")
            if not obj.get("image_path"):
                raise DataError(f"{where}: record missing 'image_path'")
            rid = str(obj["id"])
            if rid in ids:
                raise DataError(f"{where}: duplicate id {rid!r}")
            ids.add(rid)
            image_path = Path(os.path.normpath(base / obj["image_path"]))
            mask_path = Path(os.path.normpath(base / obj["mask_path"])) if obj.get("mask_path") else None
            if check_files:
                if not image_path.is_file():
                    raise DataError(f"{where}: image file not found: {image_path}")
                if mask_path is not None and not mask_path.is_file():
                    raise DataError(f"{where}: mask file not found: {mask_path}")
            extra = {k: v for k, v in obj.items() if k not in _MANIFEST_KEYS}
            records.append(ManifestRecord(rid, image_path, mask_path, obj.get("category"), extra))
    return records


def write_manifest(records: Sequence[ManifestRecord], path: str | os.PathLike,
                   root: str | os.PathLike | None = None) -> None:
    """Paths are written relative to the manifest; with ``root`` given, paths
    outside ``root`` are written absolute so the tree under it can move."""
    path = Path(path)
    base = path.parent.resolve()
    root = Path(root).resolve() if root is not None else None

    def rel(p) -> str:
        p = Path(p).resolve()
        if root is not None and not p.is_relative_to(root):
            return str(p)
        return os.path.relpath(p, base)

    with open(path, "w") as f:
        for rec in records:
            obj = {"id": rec.id, "image_path": rel(rec.image_path)}
            if rec.mask_path is not None:
                obj["mask_path"] = rel(rec.mask_path)
            if rec.category is not None:
                obj["category"] = rec.category
            obj.update(rec.extra)
            f.write(json.dumps(obj, sort_keys=False) + "\n")
