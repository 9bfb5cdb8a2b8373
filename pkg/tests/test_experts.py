from __future__ import annotations

import numpy as np
import pytest

from archiveseg.datamodel import (IGNORE, Archive, LabelMask, Provenance, PseudoLabelRecord,
                                  load_manifest)
from archiveseg.distill import TrainConfig, fit
from archiveseg.evaluation import mask_iou
from archiveseg.experts import DegenerateSupervisionError, predict_masks, refine_masks, train_expert
from archiveseg.retrieval import ExpertGroup
from archiveseg.synthdata import SynthSpec, generate_dataset

FAST = TrainConfig(max_iterations=300, lr0=0.005, crop_size=(32, 32), scale_range=(0.9, 1.1),
                   copy_paste_enabled=False)


@pytest.fixture(scope="module")
def one_category(tmp_path_factory):
    spec = SynthSpec(num_categories=1, images_per_category=20, image_size=(32, 32), seed=11,
                     multi_object=False, val_images_per_category=1)
    paths = generate_dataset(spec, tmp_path_factory.mktemp("one"))
    return [r.load() for r in load_manifest(paths["train"])]


def _clean_records(samples, category=1):
    return [PseudoLabelRecord(s.id, LabelMask.binary((s.gt_mask.labels != 0)
                                                     & (s.gt_mask.labels != IGNORE)),
                              category, Provenance.SALIENCY) for s in samples]


def test_expert_fits_clean_records(one_category):
    samples = one_category
    expert = train_expert(ExpertGroup(0, (1,)), _clean_records(samples), FAST,
                          {s.id: s.pixels for s in samples})
    preds = predict_masks(expert, [s.pixels for s in samples])
    ious = [mask_iou(p, s.gt_mask) for p, s in zip(preds, samples)]
    assert np.mean(ious) >= 0.9
    assert expert.metadata["members"] == [1] and expert.num_output_classes == 2

    archive = Archive(1, tuple((s.id, 1.0) for s in samples))
    records = refine_masks(expert, archive, {s.id: s.pixels for s in samples})
    assert len(records) == len(archive) - sum(not p.labels.any() for p in preds)
    assert all(r.provenance is Provenance.EXPERT and r.category_index == 1 for r in records)
    with pytest.raises(ValueError):
        refine_masks(expert, Archive(2, archive.entries), {s.id: s.pixels for s in samples})


def test_all_empty_supervision_is_fatal():
    recs = [PseudoLabelRecord(f"x{i}", LabelMask.binary(np.zeros((8, 8))), 1, Provenance.SALIENCY)
            for i in range(3)]
    with pytest.raises(DegenerateSupervisionError):
        train_expert(ExpertGroup(0, (1,)), recs, FAST, {r.image_id: np.zeros((8, 8, 3)) for r in recs})
    with pytest.raises(DegenerateSupervisionError):
        train_expert(ExpertGroup(0, (1,)), [], FAST, {})


def test_records_outside_group_rejected():
    rec = PseudoLabelRecord("a", LabelMask.binary(np.eye(8)), 2, Provenance.SALIENCY)
    with pytest.raises(ValueError):
        train_expert(ExpertGroup(0, (1,)), [rec], FAST, {"a": np.zeros((8, 8, 3))})


def test_predict_masks_mixed_shapes():
    samples = [(np.zeros((8, 8, 3), np.float32), np.zeros((8, 8), np.uint8))]
    expert = fit(samples, 2, TrainConfig(max_iterations=1, crop_size=(8, 8), batch_size=1, width=8))
    pixels = [np.zeros((8, 8, 3), np.float32), np.zeros((5, 7, 3), np.float32),
              np.ones((8, 8, 3), np.float32)]
    out = predict_masks(expert, pixels, batch_size=1)
    assert [m.shape for m in out] == [(8, 8), (5, 7), (8, 8)]
