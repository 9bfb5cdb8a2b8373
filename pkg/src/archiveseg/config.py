"""Run configuration: a YAML file with one section per stage.

Relative paths are resolved against the config file's directory. Every
default is filled in so the resolved config written to the run directory
fully describes the run.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .distill import TrainConfig
from .synthdata import SaliencyNoiseSpec, SynthSpec


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "run": {"output_dir": "runs/default", "seed": 0, "workers": 1},
    "data": {
        # "synth": inputs come from the synth stage; "files": from the paths below
        "source": "synth",
        "collection": None,
        "catalog": None,
        "templates": None,
        "eval_splits": {},
    },
    "synth": {},
    "retrieval": {"provider": "oracle", "archive_k": 500, "k_groups": None},
    "pseudomask": {"provider": "oracle", "noise": None, "refine_strength": 1.0},
    "experts": {"enabled": True,
                "train": {"max_iterations": 5000, "batch_size": 8, "copy_paste_enabled": False}},
    "distill": {"train": {"max_iterations": 20000, "batch_size": 8}},
    "eval": {"include_background": True, "strata_cuts": [0.01, 0.1, 0.5],
             "resize": {"mode": "none"}, "strata_splits": None},
}

SECTIONS = tuple(DEFAULTS)


# sub-mappings validated by their own types rather than by key lists
_FREEFORM = {"synth", "data.eval_splits", "experts.train", "distill.train", "pseudomask.noise",
             "eval.resize"}


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        path = prefix + key
        if path in _FREEFORM:
            if value is not None and not isinstance(value, dict):
                raise ConfigError(f"{path} must be a mapping")
            out[key] = {**(base.get(key) or {}), **(value or {})} if value is not None else None
        elif key not in base:
            raise ConfigError(f"unknown config key {path}")
        elif isinstance(value, dict) and isinstance(base[key], dict):
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        return cls.from_dict(data, path.parent)

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | os.PathLike = ".") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping of sections")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULTS, data), Path(base_dir).resolve())
        cfg.validate()
        return cfg

    def override(self, dotted: str, value) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
        cfg = RunConfig(raw, self.base_dir)
        cfg.validate()
        return cfg

    def section(self, name: str) -> dict:
        return self.raw[name]

    @property
    def seed(self) -> int:
        return int(self.raw["run"]["seed"])

    @property
    def workers(self) -> int:
        return int(self.raw["run"]["workers"])

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.raw["run"]["output_dir"])

    @property
    def from_synth(self) -> bool:
        return self.raw["data"]["source"] == "synth"

    def resolve(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def synth_spec(self) -> SynthSpec:
        kw = dict(self.raw["synth"])
        kw.setdefault("seed", self.seed)
        for key in ("image_size", "objects_per_image", "fg_fraction", "multi_fg_fraction"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return SynthSpec(**kw)

    def noise_spec(self) -> SaliencyNoiseSpec | None:
        noise = self.raw["pseudomask"]["noise"]
        if not noise:
            return None
        kw = dict(noise)
        kw.setdefault("seed", self.seed)
        return SaliencyNoiseSpec(**kw)

    def train_config(self, stage: str, seed: int | None = None) -> TrainConfig:
        kw = dict(self.raw[stage]["train"])
        kw.setdefault("seed", self.seed if seed is None else seed)
        return TrainConfig.from_dict(kw)

    def validate(self) -> None:
        try:
            run = self.raw["run"]
            if int(run["workers"]) < 1:
                raise ConfigError("run.workers must be >= 1")
            int(run["seed"])
            data = self.raw["data"]
            if data["source"] not in ("synth", "files"):
                raise ConfigError(f"data.source must be 'synth' or 'files', got {data['source']!r}")
            if data["source"] == "synth":
                self.synth_spec()
            else:
                for key in ("collection", "catalog"):
                    if not data[key]:
                        raise ConfigError(f"data.{key} is required when data.source is 'files'")
                paths = [data["collection"], data["catalog"], data["templates"],
                         *data["eval_splits"].values()]
                for p in paths:
                    if p is not None and not self.resolve(p).is_file():
                        raise ConfigError(f"input file not found: {self.resolve(p)}")
            if data["templates"] is not None and not self.resolve(data["templates"]).is_file():
                raise ConfigError(f"template file not found: {self.resolve(data['templates'])}")
            r = self.raw["retrieval"]
            if int(r["archive_k"]) < 1:
                raise ConfigError("retrieval.archive_k must be >= 1")
            if r["k_groups"] is not None and int(r["k_groups"]) < 1:
                raise ConfigError("retrieval.k_groups must be >= 1")
            if float(self.raw["pseudomask"]["refine_strength"]) < 0:
                raise ConfigError("pseudomask.refine_strength must be >= 0")
            self.noise_spec()
            self.train_config("experts")
            self.train_config("distill")
            cuts = self.raw["eval"]["strata_cuts"]
            if len(cuts) != 3 or not 0 < cuts[0] < cuts[1] < cuts[2] < 1:
                raise ConfigError(f"eval.strata_cuts must be 3 ascending values in (0, 1): {cuts}")
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"invalid config: {e}") from None

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.raw, f, sort_keys=True)
