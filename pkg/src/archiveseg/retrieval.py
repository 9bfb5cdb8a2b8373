"""Archive curation: prompt ensembling, top-k retrieval and category grouping."""

from __future__ import annotations

import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .datamodel import Archive, Category, DataError, EmbeddingVector, ImageSample, ManifestRecord

log = logging.getLogger(__name__)

_MAGIC = b"EMBSTORE"
_HEADER = struct.Struct("<8sIIB")


class EmbeddingProvider(Protocol):
    """Paired image/text encoder producing unit-norm vectors of size ``dim``."""

    dim: int

    def image_embed(self, image: ImageSample) -> EmbeddingVector: ...

    def text_embed(self, text: str) -> EmbeddingVector: ...


@dataclass(frozen=True, eq=False)
class EmbeddingStore:
    ids: tuple[str, ...]
    matrix: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        matrix = np.asarray(self.matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise DataError(f"embedding matrix must be 2-D, got {matrix.shape}")
        if matrix.shape[0] != len(self.ids):
            raise DataError(f"{matrix.shape[0]} rows for {len(self.ids)} ids")
        if self.normalized and len(matrix):
            norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
            if np.abs(norms - 1.0).max() > 1e-5:
                raise DataError("store flagged normalized has non-unit rows")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "matrix", matrix)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def save(self, path: str | os.PathLike) -> None:
        """Header (magic, dim, count, normalized) + float32 rows; ids in a ``.ids`` sidecar."""
        path = Path(path)
        with open(path, "wb") as f:
            f.write(_HEADER.pack(_MAGIC, self.dim, len(self), int(self.normalized)))
            f.write(self.matrix.astype("<f4").tobytes())
        ids_path(path).write_text("".join(i + "\n" for i in self.ids))

    @classmethod
    def load(cls, path: str | os.PathLike, mmap: bool = False) -> "EmbeddingStore":
        path = Path(path)
        with open(path, "rb") as f:
            magic, dim, count, normalized = _HEADER.unpack(f.read(_HEADER.size))
        if magic != _MAGIC:
            raise DataError(f"{path}: not an embedding store")
        if mmap and count:
            matrix = np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(count, dim))
        else:
            matrix = np.fromfile(path, dtype="<f4", offset=_HEADER.size).reshape(count, dim)
        ids = ids_path(path).read_text().splitlines()
        return cls(tuple(ids), matrix, bool(normalized))


def ids_path(path: Path) -> Path:
    return path.with_name(path.name + ".ids")


def load_templates(path: str | os.PathLike | None = None) -> list[str]:
    """Prompt templates, one per line with a ``{}`` slot; the bundled list by default."""
    if path is None:
        text = resources.files("archiveseg").joinpath("data/prompt_templates.txt").read_text()
    else:
        text = Path(path).read_text()
    templates = [line.strip() for line in text.splitlines() if line.strip()]
    for t in templates:
        if t.count("{}") != 1:
            raise DataError(f"template must contain exactly one '{{}}' slot: {t!r}")
    return templates


def ensemble_prompts(templates: Sequence[str], category: Category | str,
                     provider: EmbeddingProvider) -> EmbeddingVector:
    """Mean of the normalised per-template text embeddings, re-normalised."""
    if not templates:
        raise ValueError("empty template list")
    query = category.query if isinstance(category, Category) else category
    total = np.zeros(provider.dim)
    for t in templates:
        vec = provider.text_embed(t.format(query)).values
        total += vec / np.linalg.norm(vec)
    mean = total / len(templates)
    norm = np.linalg.norm(mean)
    if norm < 1e-8:
        raise ValueError(f"degenerate prompt ensemble for {query!r} (norm {norm:.2e})")
    return EmbeddingVector(mean / norm, normalized=True)


def embed_collection(records: Sequence[ManifestRecord], provider: EmbeddingProvider,
                     cache_path: str | os.PathLike | None = None, workers: int = 1) -> EmbeddingStore:
    """Image embeddings of a manifest, cached at ``cache_path``.

    An existing cache is reused only when its ids match the manifest exactly.
    With ``workers > 1`` the provider is called from a thread pool and must be
    thread-safe.
    """
    ids = [r.id for r in records]
    if cache_path is not None and Path(cache_path).exists():
        store = EmbeddingStore.load(cache_path)
        if list(store.ids) != ids:
            cached = set(store.ids)
            wanted = set(ids)
            raise DataError(
                f"embedding cache {cache_path} does not match the manifest: "
                f"{len(store)} cached vs {len(ids)} records, {len(wanted - cached)} missing from "
                f"cache, {len(cached - wanted)} not in manifest"
                + ("" if cached != wanted else ", same ids in a different order"))
        if len(store) and store.dim != provider.dim:
            raise DataError(f"embedding cache dim {store.dim} != provider dim {provider.dim}")
        log.info("embedding cache hit: %s (%d rows)", cache_path, len(store))
        return store

    def one(rec: ManifestRecord) -> np.ndarray:
        return provider.image_embed(rec.load()).values

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, records))
    else:
        rows = [one(r) for r in records]
    matrix = np.stack(rows) if rows else np.zeros((0, provider.dim))
    store = EmbeddingStore(tuple(ids), matrix, normalized=True)
    if cache_path is not None:
        store.save(cache_path)
    return store


def _top(cands: list[tuple[float, str]], k: int) -> list[tuple[float, str]]:
    return sorted(cands, key=lambda c: (-c[0], c[1]))[:k]


def build_archive(store: EmbeddingStore, category_embedding: EmbeddingVector, k: int,
                  category_index: int = 1, chunk_size: int = 65536) -> Archive:
    """The ``k`` images with the largest dot product to the category embedding.

    Ties are broken by ascending image id. The scan is chunked and each chunk
    reduced to its own top-k before merging, so the result does not depend
    on the chunking.
    """
    if k <= 0:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(store) == 0:
        raise ValueError("empty embedding store")
    if k > len(store):
        log.warning("archive size %d exceeds collection size %d; returning all images",
                    k, len(store))
    query = np.asarray(category_embedding.values, dtype=np.float64)
    best: list[tuple[float, str]] = []
    for start in range(0, len(store), chunk_size):
        rows = np.asarray(store.matrix[start:start + chunk_size], dtype=np.float64)
        # row-wise products keep each score independent of the chunk layout
        scores = (rows * query).sum(axis=1)
        if len(scores) > k:
            kth = np.partition(scores, len(scores) - k)[len(scores) - k]
            keep = np.nonzero(scores >= kth)[0]
        else:
            keep = np.arange(len(scores))
        chunk = [(float(scores[i]), store.ids[start + i]) for i in keep]
        best = _top(best + chunk, k)
    return Archive(category_index, tuple((i, s) for s, i in best))


@dataclass(frozen=True)
class ExpertGroup:
    group_id: int
    member_category_indices: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.member_category_indices:
            raise ValueError("expert group must have at least one member")


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = ((x[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1).min(axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.asarray(centers)


def kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 300) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; empty clusters take the
    farthest point of the largest cluster. Returns (labels, centers)."""
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = d2.argmin(axis=1)
        for j in range(k):
            if not (new == j).any():
                big = np.bincount(new, minlength=k).argmax()
                members = np.nonzero(new == big)[0]
                far = members[d2[members, big].argmax()]
                new[far] = j
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
    return labels, centers


def group_categories(text_embeddings: Sequence[EmbeddingVector], k_groups: int,
                     seed: int = 0, max_iter: int = 300) -> list[ExpertGroup]:
    """Partition categories (1-based, in input order) into ``k_groups`` by k-means.

    Group ids are numbered by each group's smallest member.
    """
    n = len(text_embeddings)
    if not 1 <= k_groups <= n:
        raise ValueError(f"k_groups must be in [1, {n}], got {k_groups}")
    x = np.stack([np.asarray(e.values, dtype=np.float64) for e in text_embeddings])
    labels, _ = kmeans(x, k_groups, seed, max_iter)
    order: dict[int, list[int]] = {}
    for cat, lab in enumerate(labels, start=1):
        order.setdefault(int(lab), []).append(cat)
    return [ExpertGroup(gid, tuple(members)) for gid, members in enumerate(order.values())]
