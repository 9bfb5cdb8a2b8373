from __future__ import annotations

import csv
import json
import logging
import os

import pytest
import yaml

from archiveseg import pipeline
from archiveseg.cli import cmd_ablate, cmd_distill, cmd_eval, cmd_retrieve, cmd_run, main
from archiveseg.config import RunConfig
from archiveseg.pipeline import Run, run_lock

TINY = {
    "run": {"output_dir": "run", "seed": 0},
    "synth": {"num_categories": 3, "images_per_category": 8, "image_size": [24, 24],
              "val_images_per_category": 2, "multi_val_images": 3},
    "retrieval": {"archive_k": 6},
    "pseudomask": {"noise": {"radius": 1, "speckle": 0.02}},
    "experts": {"train": {"max_iterations": 40, "lr0": 0.01, "crop_size": [24, 24], "width": 8}},
    "distill": {"train": {"max_iterations": 4, "crop_size": [24, 24], "width": 8}},
}


def _cfg(tmp_path, **overrides):
    data = json.loads(json.dumps(TINY))
    for dotted, value in overrides.items():
        node = data
        *parents, leaf = dotted.split("__")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return RunConfig.from_dict(data, tmp_path)


@pytest.fixture
def done_run(tmp_path):
    cfg = _cfg(tmp_path)
    assert cmd_run(cfg) == 0
    return cfg


def test_dependency_missing_exits_2(tmp_path, caplog):
    caplog.set_level(logging.ERROR)
    assert cmd_distill(_cfg(tmp_path)) == 2
    assert "'experts'" in caplog.text


def test_full_chain_and_layout(done_run):
    run = Run(done_run)
    report = json.loads((run.stage_dir("eval") / "eval_report.json").read_text())
    assert set(report["splits"]) == {"val_single", "val_multi"}
    assert set(report["pseudo_label_quality"]) == {"saliency_raw", "saliency", "expert"}
    manifest = json.loads((run.dir / "run_manifest.json").read_text())
    assert set(manifest["stages"]) == set(pipeline.STAGES)
    assert all("seconds" in m and "key" in m for m in manifest["stages"].values())
    assert (run.dir / "config.resolved.yaml").is_file()
    assert not list(run.stages_dir.glob("*.partial"))
    resolved = yaml.safe_load((run.dir / "config.resolved.yaml").read_text())
    assert resolved["retrieval"]["archive_k"] == 6 and resolved["eval"]["include_background"]


def test_stage_files_stay_inside_run_dir(done_run):
    run = Run(done_run)
    root = run.dir.resolve()
    for manifest in run.stages_dir.rglob("*.jsonl"):
        if manifest.name.endswith("log.jsonl"):
            continue
        for line in manifest.read_text().splitlines():
            rec = json.loads(line)
            for key in ("image_path", "mask_path"):
                if key in rec:
                    path = (manifest.parent / rec[key]).resolve()
                    assert path.is_relative_to(root), (manifest, rec[key])


def test_rerun_is_noop(done_run, caplog):
    caplog.set_level(logging.INFO)
    marker = Run(done_run).marker_path("retrieve")
    before = marker.stat().st_mtime_ns
    assert cmd_retrieve(done_run) == 0
    assert marker.stat().st_mtime_ns == before
    assert "nothing to do" in caplog.text


def test_changed_config_needs_force(done_run, tmp_path):
    changed = done_run.override("retrieval.archive_k", 5)
    assert cmd_retrieve(changed) == 1
    run = Run(changed)
    assert cmd_retrieve(changed, force=True) == 0
    assert run.marker("retrieve")["key"] == run.key("retrieve")
    # downstream results no longer describe the archives
    assert all(run.marker(s) is None for s in ("pseudolabel", "experts", "distill", "eval"))
    assert cmd_eval(changed) == 2


def test_interrupted_stage_leaves_no_marker_and_resumes(tmp_path, monkeypatch):
    cfg = _cfg(tmp_path)

    def crash(run, out):
        (out / "half_written.txt").write_text("x")
        raise RuntimeError("killed")

    monkeypatch.setitem(pipeline._STAGE_FUNCS, "experts", crash)
    assert cmd_run(cfg) == 1
    run = Run(cfg)
    assert run.marker("pseudolabel") is not None and run.marker("experts") is None
    monkeypatch.undo()
    assert cmd_run(cfg) == 0
    assert run.marker("eval") is not None
    assert not (run.stage_dir("experts") / "half_written.txt").exists()


def test_locked_run_dir_is_refused(tmp_path):
    cfg = _cfg(tmp_path)
    with run_lock(Run(cfg).dir):
        assert cmd_run(cfg) == 1


def test_main_entry_point(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(TINY))
    assert main(["distill", "--config", str(tmp_path / "c.yaml")]) == 2
    assert main(["synth", "--config", str(tmp_path / "c.yaml"), "--seed", "4",
                 "--run-dir", str(tmp_path / "elsewhere")]) == 0
    assert (tmp_path / "elsewhere" / "stages" / "synth.done.json").is_file()
    resolved = yaml.safe_load((tmp_path / "elsewhere" / "config.resolved.yaml").read_text())
    assert resolved["run"]["seed"] == 4
    (tmp_path / "bad.yaml").write_text("retrieval: {archive_k: -3}\n")
    assert main(["run", "--config", str(tmp_path / "bad.yaml")]) == 1


@pytest.mark.parametrize("axis,values", [("archive_size", ["0"]), ("archive_size", ["x"]),
                                         ("n_max", []), ("k_groups", ["2", "9"]),
                                         ("colour", ["1"]), ("archive_size", ["2", "2"])])
def test_ablation_rejects_bad_values_before_running(tmp_path, axis, values):
    cfg = _cfg(tmp_path)
    assert cmd_ablate(cfg, axis, values) == 1
    assert not (Run(cfg).dir / "ablate").exists()


def test_single_value_ablation_matches_plain_run(tmp_path):
    cfg = _cfg(tmp_path / "a")
    assert cmd_ablate(cfg, "archive_size", ["4"]) == 0
    table = Run(cfg).dir / "ablate" / "archive_size"
    with open(table / "results.tsv") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    assert len(rows) == 1 and rows[0]["value"] == "4"

    plain = _cfg(tmp_path / "b", retrieval__archive_k=4)
    assert cmd_run(plain) == 0
    report = json.loads((Run(plain).stage_dir("eval") / "eval_report.json").read_text())
    assert float(rows[0]["miou"]) == report["all"]["miou"]
    assert float(rows[0]["miou_val_multi"]) == report["splits"]["val_multi"]["miou"]
    sub = table / "archive_size=4" / "stages" / "eval" / "eval_report.json"
    assert sub.read_bytes() == (Run(plain).stage_dir("eval") / "eval_report.json").read_bytes()
    with open(table / "plot.csv") as f:
        assert next(csv.reader(f)) == ["archive_size", "miou"]


def test_ablation_shares_unchanged_stages(tmp_path):
    cfg = _cfg(tmp_path)
    assert cmd_ablate(cfg, "n_max", ["1", "2"]) == 0
    root = Run(cfg).dir / "ablate" / "n_max"
    one = Run(cfg.override("distill.train.n_max", 1), root / "n_max=1")
    two = Run(cfg.override("distill.train.n_max", 2), root / "n_max=2")
    assert two.marker("experts").get("shared_from") == str(one.dir)
    assert "shared_from" not in two.marker("distill")
    a = one.stage_dir("experts") / "expert_000.pt"
    b = two.stage_dir("experts") / "expert_000.pt"
    assert os.path.samefile(a, b)


def test_files_mode(tmp_path, small_dataset):
    spec, paths = small_dataset
    data = json.loads(json.dumps(TINY))
    data.pop("synth")
    data["data"] = {"source": "files", "collection": str(paths["train"]),
                    "catalog": str(paths["catalog"]),
                    "eval_splits": {"val_single": str(paths["val_single"])}}
    cfg = RunConfig.from_dict(data, tmp_path)
    run = Run(cfg)
    assert run.stages == pipeline.STAGES[1:]
    assert cmd_run(cfg) == 0
    report = json.loads((run.stage_dir("eval") / "eval_report.json").read_text())
    assert list(report["splits"]) == ["val_single"]
    # pseudo-label manifests point at the external images by absolute path
    line = (run.stage_dir("pseudolabel") / "saliency" / "pseudolabels.jsonl").read_text().splitlines()[0]
    assert os.path.isabs(json.loads(line)["image_path"])
