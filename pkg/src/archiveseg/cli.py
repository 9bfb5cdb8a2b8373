"""Command line entry point.

Exit codes: 0 success, 1 config/runtime error (including a config change
on a completed stage without ``--force``), 2 missing or stale dependency
stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import torch

from .config import ConfigError, RunConfig
from .datamodel import DataError
from .pipeline import (AXES, STAGES, Run, RunLockedError, StageConflictError,
                       StageDependencyError, run_ablation, run_lock)

log = logging.getLogger("archiveseg")

EXIT_OK, EXIT_ERROR, EXIT_DEPENDENCY = 0, 1, 2


def _guard(fn):
    def wrapped(*args, **kwargs) -> int:
        try:
            fn(*args, **kwargs)
        except StageDependencyError as e:
            log.error("%s", e)
            return EXIT_DEPENDENCY
        except (ConfigError, StageConflictError, RunLockedError, DataError) as e:
            log.error("%s", e)
            return EXIT_ERROR
        except (ValueError, RuntimeError, OSError, KeyError) as e:
            log.error("%s: %s", type(e).__name__, e)
            return EXIT_ERROR
        return EXIT_OK
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


def _stage(cfg: RunConfig, stage: str, force: bool = False) -> None:
    torch.set_num_threads(cfg.workers)
    run = Run(cfg)
    with run_lock(run.dir):
        status = run.execute(stage, force)
    log.info("%s: %s", stage, status)


@_guard
def cmd_stage(cfg: RunConfig, stage: str, force: bool = False) -> None:
    _stage(cfg, stage, force)


def cmd_synth(cfg: RunConfig, force: bool = False) -> int:
    return cmd_stage(cfg, "synth", force)


def cmd_retrieve(cfg: RunConfig, force: bool = False) -> int:
    return cmd_stage(cfg, "retrieve", force)


def cmd_pseudolabel(cfg: RunConfig, force: bool = False) -> int:
    return cmd_stage(cfg, "pseudolabel", force)


def cmd_experts(cfg: RunConfig, force: bool = False) -> int:
    return cmd_stage(cfg, "experts", force)


def cmd_distill(cfg: RunConfig, force: bool = False) -> int:
    return cmd_stage(cfg, "distill", force)


def cmd_eval(cfg: RunConfig, force: bool = False) -> int:
    return cmd_stage(cfg, "eval", force)


@_guard
def cmd_run(cfg: RunConfig, force: bool = False) -> None:
    """Every stage in order; completed stages with unchanged keys are skipped."""
    for stage in Run(cfg).stages:
        _stage(cfg, stage, force)


@_guard
def cmd_ablate(cfg: RunConfig, axis: str, values: Sequence, force: bool = False) -> None:
    torch.set_num_threads(cfg.workers)
    out = run_ablation(cfg, axis, values, force)
    log.info("ablation results in %s", out / "results.tsv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="archiveseg",
                                     description="Segmenters from retrieved image archives.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="run config (YAML)")
    common.add_argument("--force", action="store_true",
                        help="recompute stages whose config changed")
    common.add_argument("--workers", type=int, help="worker threads (overrides run.workers)")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("--run-dir", type=Path, help="run directory (overrides run.output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run", parents=[common], help="run every stage")
    ablate = sub.add_parser("ablate", parents=[common], help="sweep one setting")
    ablate.add_argument("--axis", required=True, choices=sorted(AXES))
    ablate.add_argument("--values", required=True,
                        help="comma-separated values, e.g. 5,20,50,100")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.override("run.seed", args.seed)
    if args.workers is not None:
        cfg = cfg.override("run.workers", args.workers)
    if args.run_dir is not None:
        cfg = cfg.override("run.output_dir", str(args.run_dir.resolve()))
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as e:
        log.error("%s", e)
        return EXIT_ERROR
    if args.command == "run":
        return cmd_run(cfg, args.force)
    if args.command == "ablate":
        values = [v for v in args.values.split(",") if v.strip()]
        return cmd_ablate(cfg, args.axis, values, args.force)
    return cmd_stage(cfg, args.command, args.force)


if __name__ == "__main__":
    sys.exit(main())
