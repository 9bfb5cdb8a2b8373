"""Staged pipeline over a run directory.

Layout::

    <run_dir>/
      config.resolved.yaml     every setting, defaults included
      run_manifest.json        config hash + one entry per committed stage
      stages/<stage>/          stage outputs
      stages/<stage>.done.json completion marker (key, artifacts, timing)
      cache/                   embedding caches
      .lock

A stage writes into ``stages/<stage>.partial`` which is renamed into place
before its marker is written, so a marker always describes complete outputs.
Each stage key hashes that stage's config section with the keys of the
stages it depends on (and digests of external inputs).
"""

from __future__ import annotations

import contextlib
import csv
import fcntl
import hashlib
import importlib
import json
import logging
import os
import shutil
import time
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import ConfigError, RunConfig
from .datamodel import Archive, CategoryCatalog, load_manifest, read_image
from .distill import ResizePolicy, predict, train_distilled
from .evaluation import (ConfusionAccumulator, EvalReport, compute_iou, mask_iou,
                         size_stratified_miou, write_json)
from .experts import refine_masks, train_expert
from .models import TrainedSegmenter, config_hash
from .pseudomask import (generate_saliency, is_flagged, label_archive, load_records,
                         refine_edges, save_records)
from .retrieval import (ExpertGroup, build_archive, embed_collection, ensemble_prompts,
                        group_categories, load_templates)
from .synthdata import OracleEmbeddingProvider, OracleSaliencyProvider, generate_dataset

log = logging.getLogger(__name__)

STAGES = ("synth", "retrieve", "pseudolabel", "experts", "distill", "eval")
SECTION = {"synth": "synth", "retrieve": "retrieval", "pseudolabel": "pseudomask",
           "experts": "experts", "distill": "distill", "eval": "eval"}


class StageDependencyError(RuntimeError):
    def __init__(self, stage: str, reason: str):
        super().__init__(f"required stage '{stage}' is {reason}; run it first")
        self.stage = stage


class StageConflictError(RuntimeError):
    pass


class RunLockedError(RuntimeError):
    pass


@contextlib.contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    fd = os.open(run_dir / ".lock", os.O_CREAT | os.O_RDWR)
    try:
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise RunLockedError(f"run directory {run_dir} is in use by another process") from None
        yield
    finally:
        os.close(fd)


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _atomic_json(obj, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write_json(obj, tmp)
    os.replace(tmp, path)


def _link_tree(src: Path, dst: Path) -> None:
    def link(s, d):
        try:
            os.link(s, d)
        except OSError:
            shutil.copy2(s, d)
    shutil.copytree(src, dst, copy_function=link)


def _import(spec: str):
    module, _, attr = spec.partition(":")
    if not attr:
        raise ConfigError(f"provider must be 'oracle' or 'module:factory', got {spec!r}")
    return getattr(importlib.import_module(module), attr)


def make_embedding_provider(spec: str, catalog: CategoryCatalog):
    return OracleEmbeddingProvider(catalog) if spec == "oracle" else _import(spec)(catalog)


def make_saliency_provider(spec: str, noise):
    return OracleSaliencyProvider(noise) if spec == "oracle" else _import(spec)()


class Run:
    def __init__(self, cfg: RunConfig, run_dir: Path | None = None,
                 share_from: Iterable[Path] = (), cache_dir: Path | None = None):
        self.cfg = cfg
        self.dir = Path(run_dir) if run_dir is not None else cfg.output_dir
        self.stages_dir = self.dir / "stages"
        self.cache_dir = Path(cache_dir) if cache_dir is not None else self.dir / "cache"
        self.share_from = [Path(p) for p in share_from]
        self._keys: dict[str, str] = {}

    # -- layout ---------------------------------------------------------

    @property
    def stages(self) -> tuple[str, ...]:
        return STAGES if self.cfg.from_synth else STAGES[1:]

    def deps(self, stage: str) -> list[str]:
        if stage == "synth":
            return []
        if stage == "retrieve":
            return ["synth"] if self.cfg.from_synth else []
        return [STAGES[STAGES.index(stage) - 1]]

    def downstream(self, stage: str) -> list[str]:
        return list(STAGES[STAGES.index(stage) + 1:])

    def stage_dir(self, stage: str) -> Path:
        return self.stages_dir / stage

    def marker_path(self, stage: str) -> Path:
        return self.stages_dir / f"{stage}.done.json"

    def marker(self, stage: str) -> dict | None:
        path = self.marker_path(stage)
        return json.loads(path.read_text()) if path.is_file() else None

    def collection_path(self) -> Path:
        if self.cfg.from_synth:
            return self.stage_dir("synth") / "train.jsonl"
        return self.cfg.resolve(self.cfg.section("data")["collection"])

    def catalog_path(self) -> Path:
        if self.cfg.from_synth:
            return self.stage_dir("synth") / "catalog.txt"
        return self.cfg.resolve(self.cfg.section("data")["catalog"])

    def eval_splits(self) -> dict[str, Path]:
        if self.cfg.from_synth:
            names = ["val_single"] + (["val_multi"] if self.cfg.synth_spec().multi_object else [])
            return {n: self.stage_dir("synth") / f"{n}.jsonl" for n in names}
        return {n: self.cfg.resolve(p)
                for n, p in sorted(self.cfg.section("data")["eval_splits"].items())}

    def catalog(self) -> CategoryCatalog:
        return CategoryCatalog.load(self.catalog_path())

    # -- keys -------------------------------------------------------------

    def key(self, stage: str) -> str:
        if stage not in self._keys:
            parts = {"stage": stage, "seed": self.cfg.seed,
                     "section": self.cfg.section(SECTION[stage]),
                     "deps": {d: self.key(d) for d in self.deps(stage)}}
            data = self.cfg.section("data")
            if stage == "retrieve":
                inputs = {"templates": data["templates"] and file_digest(self.cfg.resolve(data["templates"]))}
                if not self.cfg.from_synth:
                    inputs["collection"] = file_digest(self.collection_path())
                    inputs["catalog"] = file_digest(self.catalog_path())
                parts["inputs"] = inputs
            if stage == "eval" and not self.cfg.from_synth:
                parts["inputs"] = {n: file_digest(p) for n, p in self.eval_splits().items()}
            self._keys[stage] = config_hash(parts)
        return self._keys[stage]

    def config_hash(self) -> str:
        raw = json.loads(json.dumps(self.cfg.raw, default=str))
        raw["run"].pop("output_dir", None)
        raw["run"].pop("workers", None)
        return config_hash(raw)

    # -- execution ----------------------------------------------------------

    def execute(self, stage: str, force: bool = False) -> str:
        """Run one stage; returns ``"ran"``, ``"cached"`` or ``"shared"``."""
        if stage not in self.stages:
            raise ConfigError(f"stage '{stage}' does not apply to this config")
        for dep in self.deps(stage):
            marker = self.marker(dep)
            if marker is None:
                raise StageDependencyError(dep, "missing")
            if marker["key"] != self.key(dep):
                raise StageDependencyError(dep, "stale (its config changed)")
        key = self.key(stage)
        marker = self.marker(stage)
        if marker is not None and marker["key"] == key:
            log.info("%s: up to date (%s), nothing to do", stage, key)
            return "cached"
        if marker is not None and not force:
            raise StageConflictError(
                f"stage '{stage}' was completed with a different config "
                f"({marker['key']} != {key}); pass --force to recompute")
        self.stages_dir.mkdir(parents=True, exist_ok=True)
        self.cfg.dump(self.dir / "config.resolved.yaml")
        tmp = self.stages_dir / f"{stage}.partial"
        shutil.rmtree(tmp, ignore_errors=True)
        if marker is None and self._adopt(stage, tmp):
            return "shared"
        tmp.mkdir()
        start = time.perf_counter()
        log.info("%s: running (%s)", stage, key)
        artifacts = _STAGE_FUNCS[stage](self, tmp)
        self._commit(stage, tmp, {"key": key, "artifacts": artifacts,
                                  "seconds": round(time.perf_counter() - start, 3)})
        return "ran"

    def _adopt(self, stage: str, tmp: Path) -> bool:
        key = self.key(stage)
        for donor in self.share_from:
            marker_path = donor / "stages" / f"{stage}.done.json"
            if not marker_path.is_file():
                continue
            marker = json.loads(marker_path.read_text())
            if marker["key"] != key:
                continue
            _link_tree(donor / "stages" / stage, tmp)
            self._commit(stage, tmp, {**marker, "shared_from": str(donor)})
            log.info("%s: reused outputs from %s", stage, donor)
            return True
        return False

    def _commit(self, stage: str, tmp: Path, marker: dict) -> None:
        for s in [stage] + self.downstream(stage):
            self.marker_path(s).unlink(missing_ok=True)
        final = self.stage_dir(stage)
        shutil.rmtree(final, ignore_errors=True)
        tmp.rename(final)
        _atomic_json(marker, self.marker_path(stage))
        self._write_manifest()

    def _write_manifest(self) -> None:
        stages = {s: m for s in STAGES if (m := self.marker(s)) is not None}
        _atomic_json({"config_hash": self.config_hash(), "stages": stages,
                      "artifacts_root": "stages"}, self.dir / "run_manifest.json")

    def run_all(self, force: bool = False) -> None:
        for stage in self.stages:
            self.execute(stage, force)

    # -- shared loaders -------------------------------------------------------

    def load_archives(self) -> dict[int, Archive]:
        data = json.loads((self.stage_dir("retrieve") / "archives.json").read_text())
        return {a["category_index"]: Archive.from_json(a) for a in data}

    def load_groups(self) -> list[ExpertGroup]:
        data = json.loads((self.stage_dir("retrieve") / "groups.json").read_text())
        return [ExpertGroup(g["group_id"], tuple(g["members"])) for g in data]

    def collection(self):
        return {r.id: r for r in load_manifest(self.collection_path())}

    def load_pixels(self, ids: Iterable[str]) -> dict[str, np.ndarray]:
        records = self.collection()
        return {i: read_image(records[i].image_path) for i in sorted(set(ids))}


# ---------------------------------------------------------------------------
# stages


def _rel(run: Run, path: Path, out: Path) -> str:
    return str(path.relative_to(out))


def stage_synth(run: Run, out: Path) -> dict:
    paths = generate_dataset(run.cfg.synth_spec(), out)
    return {k: _rel(run, p, out) for k, p in paths.items()}


def stage_retrieve(run: Run, out: Path) -> dict:
    cfg = run.cfg.section("retrieval")
    catalog = run.catalog()
    records = load_manifest(run.collection_path())
    provider = make_embedding_provider(cfg["provider"], catalog)
    run.cache_dir.mkdir(parents=True, exist_ok=True)
    tag = config_hash({"collection": file_digest(run.collection_path()),
                       "provider": cfg["provider"], "dim": provider.dim})
    store = embed_collection(records, provider, run.cache_dir / f"embeddings-{tag}.bin",
                             workers=run.cfg.workers)
    templates = load_templates(run.cfg.resolve(run.cfg.section("data")["templates"]))
    text = [ensemble_prompts(templates, cat, provider) for cat in catalog]
    k = int(cfg["archive_k"])
    archives = [build_archive(store, t, k, i) for i, t in enumerate(text, start=1)]
    k_groups = int(cfg["k_groups"] or len(catalog))
    if k_groups > len(catalog):
        raise ConfigError(f"retrieval.k_groups {k_groups} exceeds {len(catalog)} categories")
    groups = group_categories(text, k_groups, run.cfg.seed)

    write_json([a.to_json() for a in archives], out / "archives.json")
    write_json([{"group_id": g.group_id, "members": list(g.member_category_indices)}
                for g in groups], out / "groups.json")
    np.save(out / "text_embeddings.npy", np.stack([t.values for t in text]))
    by_id = {r.id: r for r in records}
    precision = {}
    for cat, archive in zip(catalog, archives):
        labelled = [by_id[i].category for i in archive.image_ids if by_id[i].category is not None]
        if labelled:
            precision[cat.name] = sum(c == cat.name for c in labelled) / len(labelled)
    write_json({"archive_precision": precision, "archive_sizes": [len(a) for a in archives]},
               out / "retrieval_stats.json")
    return {"archives": "archives.json", "groups": "groups.json",
            "text_embeddings": "text_embeddings.npy"}


def stage_pseudolabel(run: Run, out: Path) -> dict:
    cfg = run.cfg.section("pseudomask")
    catalog = run.catalog()
    archives = run.load_archives()
    collection = run.collection()
    ids = sorted({i for a in archives.values() for i in a.image_ids})
    images = {i: collection[i].load() for i in ids}
    provider = make_saliency_provider(cfg["provider"], run.cfg.noise_spec())
    strength = float(cfg["refine_strength"])
    raw, refined = [], []
    for c in sorted(archives):
        archive = archives[c]
        masks = generate_saliency(archive, images, provider, workers=run.cfg.workers)
        raw += label_archive(archive, masks)
        smoothed = [None if is_flagged(m) else refine_edges(images[i], m, strength)
                    for i, m in zip(archive.image_ids, masks)]
        refined += label_archive(archive, smoothed)
    paths = {i: collection[i].image_path for i in ids}
    save_records(raw, out / "saliency_raw", paths, catalog, root=run.dir)
    save_records(refined, out / "saliency", paths, catalog, root=run.dir)
    return {"saliency_raw": "saliency_raw/pseudolabels.jsonl",
            "saliency": "saliency/pseudolabels.jsonl"}


def _group_seed(seed: int, group_id: int) -> int:
    return int(np.random.SeedSequence([seed, group_id]).generate_state(1)[0])


def stage_experts(run: Run, out: Path) -> dict:
    catalog = run.catalog()
    archives = run.load_archives()
    saliency = load_records(run.stage_dir("pseudolabel") / "saliency" / "pseudolabels.jsonl")
    collection = run.collection()
    paths = {r.image_id: collection[r.image_id].image_path for r in saliency}
    if not run.cfg.section("experts")["enabled"]:
        save_records(saliency, out / "pseudolabels", paths, catalog, root=run.dir)
        return {"pseudolabels": "pseudolabels/pseudolabels.jsonl"}
    pixels = run.load_pixels(i for a in archives.values() for i in a.image_ids)
    corpus = []
    checkpoints = {}
    for group in run.load_groups():
        members = set(group.member_category_indices)
        records = [r for r in saliency if r.category_index in members]
        config = run.cfg.train_config("experts", seed=_group_seed(run.cfg.seed, group.group_id))
        name = f"expert_{group.group_id:03d}"
        expert = train_expert(group, records, config, pixels, log_path=out / f"{name}.log.jsonl")
        expert.metadata["run_config_hash"] = run.config_hash()
        expert.save(out / f"{name}.pt")
        checkpoints[name] = f"{name}.pt"
        for c in sorted(members):
            corpus += refine_masks(expert, archives[c], pixels)
        paths.update({i: collection[i].image_path for i in pixels})
    save_records(corpus, out / "pseudolabels", paths, catalog, root=run.dir)
    return {"pseudolabels": "pseudolabels/pseudolabels.jsonl", **checkpoints}


def stage_distill(run: Run, out: Path) -> dict:
    catalog = run.catalog()
    corpus = load_records(run.stage_dir("experts") / "pseudolabels" / "pseudolabels.jsonl")
    pixels = run.load_pixels(r.image_id for r in corpus)
    model = train_distilled(corpus, catalog, run.cfg.train_config("distill"), pixels,
                            log_path=out / "train_log.jsonl")
    model.metadata["run_config_hash"] = run.config_hash()
    model.save(out / "model.pt")
    return {"model": "model.pt", "train_log": "train_log.jsonl"}


def _quality(records, gts: dict[str, np.ndarray], catalog: CategoryCatalog) -> dict:
    per_cat: dict[int, list[float]] = {}
    for r in records:
        if r.image_id not in gts:
            continue
        iou = mask_iou(r.mask, gts[r.image_id], category=r.category_index)
        if iou is not None:
            per_cat.setdefault(r.category_index, []).append(iou)
    means = {catalog[c].name: float(np.mean(v)) for c, v in sorted(per_cat.items())}
    return {"per_category": means,
            "mean": float(np.mean(list(means.values()))) if means else None}


def stage_eval(run: Run, out: Path) -> dict:
    cfg = run.cfg.section("eval")
    catalog = run.catalog()
    model = TrainedSegmenter.load(run.stage_dir("distill") / "model.pt")
    policy = ResizePolicy(**cfg["resize"])
    include_bg = bool(cfg["include_background"])
    cuts = tuple(cfg["strata_cuts"])
    report: dict = {"classes": ["background"] + catalog.names,
                    "config": {"include_background": include_bg, "strata_cuts": list(cuts),
                               "strata_cuts_note": "placeholder cut points on foreground area ratio",
                               "resize": dict(cfg["resize"])},
                    "splits": {}}
    total = ConfusionAccumulator(catalog.num_classes)
    for name, path in run.eval_splits().items():
        records = load_manifest(path)
        acc = ConfusionAccumulator(catalog.num_classes)
        pairs = []
        for rec in records:
            sample = rec.load(catalog.num_classes)
            pred, _ = predict(model, sample, policy)
            acc.accumulate(pred, sample.gt_mask)
            pairs.append((pred, sample.gt_mask))
        per_class, miou = compute_iou(acc, include_bg)
        strata_splits = cfg["strata_splits"]
        if strata_splits is None:
            wants_strata = all(r.category is not None for r in records)
        else:
            wants_strata = name in strata_splits
        strata = size_stratified_miou(pairs, catalog.num_classes, cuts, include_bg) if wants_strata else {}
        report["splits"][name] = EvalReport(per_class, miou, strata,
                                            {"images": len(records)}).to_dict()
        total = total.merge(acc)
    per_class, miou = compute_iou(total, include_bg)
    report["all"] = {"per_class_iou": per_class, "miou": miou}

    collection = load_manifest(run.collection_path())
    if all(r.mask_path is not None for r in collection):
        sets = {"saliency_raw": run.stage_dir("pseudolabel") / "saliency_raw" / "pseudolabels.jsonl",
                "saliency": run.stage_dir("pseudolabel") / "saliency" / "pseudolabels.jsonl"}
        if run.cfg.section("experts")["enabled"]:
            sets["expert"] = run.stage_dir("experts") / "pseudolabels" / "pseudolabels.jsonl"
        loaded = {k: load_records(p) for k, p in sets.items()}
        needed = {r.image_id for recs in loaded.values() for r in recs}
        gts = {r.id: r.load(catalog.num_classes).gt_mask.labels for r in collection if r.id in needed}
        report["pseudo_label_quality"] = {k: _quality(v, gts, catalog) for k, v in loaded.items()}
    write_json(report, out / "eval_report.json")
    return {"report": "eval_report.json"}


_STAGE_FUNCS = {"synth": stage_synth, "retrieve": stage_retrieve, "pseudolabel": stage_pseudolabel,
                "experts": stage_experts, "distill": stage_distill, "eval": stage_eval}


# ---------------------------------------------------------------------------
# ablations

AXES = {"archive_size": "retrieval.archive_k", "n_max": "distill.train.n_max",
        "k_groups": "retrieval.k_groups"}


def ablation_configs(cfg: RunConfig, axis: str, values: Iterable) -> list[tuple[int, RunConfig]]:
    """One config per value; every value is validated before anything runs."""
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    parsed = []
    for v in values:
        try:
            iv = int(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{axis} values must be integers, got {v!r}") from None
        if iv < 1 or str(iv) != str(v).strip():
            raise ConfigError(f"{axis} values must be positive integers, got {v!r}")
        parsed.append(iv)
    if not parsed:
        raise ConfigError("no ablation values given")
    if len(set(parsed)) != len(parsed):
        raise ConfigError(f"duplicate ablation values: {parsed}")
    if axis == "k_groups":
        n = (cfg.synth_spec().num_categories if cfg.from_synth
             else len(CategoryCatalog.load(cfg.resolve(cfg.section("data")["catalog"]))))
        bad = [v for v in parsed if v > n]
        if bad:
            raise ConfigError(f"k_groups values {bad} exceed the {n} categories")
    return [(v, cfg.override(AXES[axis], v)) for v in parsed]


def run_ablation(cfg: RunConfig, axis: str, values: Iterable, force: bool = False) -> Path:
    """Full pipeline per value under ``<run_dir>/ablate/<axis>/``; writes
    ``results.tsv`` (all metrics) and ``plot.csv`` (value, mIoU)."""
    subs = ablation_configs(cfg, axis, values)
    parent = Run(cfg)
    root = parent.dir / "ablate" / axis
    rows = []
    with run_lock(parent.dir):
        donors = [parent.dir]
        for value, sub_cfg in subs:
            sub_dir = root / f"{axis}={value}"
            sub = Run(sub_cfg, sub_dir, share_from=donors, cache_dir=parent.cache_dir)
            with run_lock(sub_dir):
                sub.run_all(force)
            donors.append(sub_dir)
            report = json.loads((sub.stage_dir("eval") / "eval_report.json").read_text())
            row = {"value": value, "miou": report["all"]["miou"]}
            for split, rep in sorted(report["splits"].items()):
                row[f"miou_{split}"] = rep["miou"]
            rows.append(row)
    with open(root / "results.tsv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), delimiter="\t")
        writer.writeheader()
        writer.writerows(rows)
    with open(root / "plot.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([axis, "miou"])
        writer.writerows([r["value"], r["miou"]] for r in rows)
    return root
