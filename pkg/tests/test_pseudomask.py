from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage

from archiveseg.datamodel import (Archive, CategoryCatalog, ImageSample, LabelMask, Provenance,
                                  load_manifest)
from archiveseg.evaluation import mask_iou
from archiveseg.pseudomask import (UnusableArchiveError, generate_saliency, is_flagged,
                                   label_archive, load_records, refine_edges, save_records)
from archiveseg.synthdata import OracleSaliencyProvider


def _archive_from(records, category=1):
    return Archive(category, tuple((r.id, 1.0) for r in records))


class FlakyProvider:
    def predict(self, image):
        if image.id.endswith("1"):
            raise RuntimeError("boom")
        if image.id.endswith("2"):
            return LabelMask(np.zeros((3, 3), np.uint8), 2)  # wrong shape
        return OracleSaliencyProvider().predict(image)


def test_oracle_masks_equal_gt_foreground(small_dataset):
    _, paths = small_dataset
    records = load_manifest(paths["train"])
    images = {r.id: r.load() for r in records}
    masks = generate_saliency(_archive_from(records), images, OracleSaliencyProvider())
    for rec, m in zip(records, masks):
        assert m.shape == images[rec.id].shape
        assert mask_iou(m, images[rec.id].gt_mask) == 1.0


def test_background_only_image_is_flagged():
    img = ImageSample("blank", np.full((8, 8, 3), 0.4))
    [mask] = generate_saliency(Archive(1, (("blank", 1.0),)), {"blank": img},
                               OracleSaliencyProvider())
    assert not mask.labels.any() and is_flagged(mask)


def test_provider_failures_become_none(small_dataset):
    _, paths = small_dataset
    records = load_manifest(paths["train"])[:4]
    images = {r.id: r.load() for r in records}
    masks = generate_saliency(_archive_from(records), images, FlakyProvider(), workers=2)
    assert [m is None for m in masks] == [False, True, True, False]


def test_strength_zero_is_identity():
    rng = np.random.default_rng(0)
    img = rng.random((12, 12, 3))
    mask = LabelMask.binary(rng.random((12, 12)) > 0.5)
    assert refine_edges(img, mask, 0.0) == mask


@pytest.mark.parametrize("strength", [0.5, 1.0, 3.0, 10.0])
def test_constant_image_leaves_mask_unchanged(strength):
    rng = np.random.default_rng(1)
    img = np.full((16, 16, 3), 0.3)
    mask = LabelMask.binary(rng.random((16, 16)) > 0.6)
    assert refine_edges(img, mask, strength) == mask


def test_speckle_is_cleaned_up():
    img = np.full((24, 24, 3), 0.5)
    img[6:18, 6:18] = [0.9, 0.1, 0.1]
    truth = np.zeros((24, 24), bool)
    truth[6:18, 6:18] = True
    noisy = truth.copy()
    for y, x in [(1, 1), (2, 20), (21, 3), (20, 20), (3, 12)]:
        noisy[y, x] = True
    noisy[10, 10] = noisy[14, 9] = False
    before = ndimage.label(noisy)[1]
    out = refine_edges(img, LabelMask.binary(noisy), 1.0)
    assert ndimage.label(out.labels)[1] < before
    assert not out.labels[~truth].any()
    # holes need the smoothed term to outweigh the input mask
    out = refine_edges(img, LabelMask.binary(noisy), 2.0)
    assert np.array_equal(out.labels.astype(bool), truth)


def test_labelling_counts():
    masks = [LabelMask.binary(np.eye(4)) for _ in range(5)]
    archive = Archive(3, tuple((f"x{i}", 1.0) for i in range(5)))
    records = label_archive(archive, masks)
    assert len(records) == 5 and {r.category_index for r in records} == {3}
    assert all(r.provenance is Provenance.SALIENCY for r in records)
    masks[2] = LabelMask.binary(np.zeros((4, 4)))
    assert len(label_archive(archive, masks)) == 4
    masks[0] = None
    assert [r.image_id for r in label_archive(archive, masks)] == ["x1", "x3", "x4"]


def test_all_flagged_archive_is_fatal():
    archive = Archive(1, (("a", 1.0), ("b", 0.5)))
    with pytest.raises(UnusableArchiveError):
        label_archive(archive, [None, LabelMask.binary(np.zeros((2, 2)))])


def test_record_count_equals_nonempty_saliency(small_dataset):
    _, paths = small_dataset
    records = load_manifest(paths["train"]) + load_manifest(paths["val_single"])
    images = {r.id: r.load() for r in records}
    blank = ImageSample("blank", np.full((32, 32, 3), 0.5))
    images["blank"] = blank
    archive = Archive(2, tuple((r.id, 1.0) for r in records) + (("blank", 0.0),))
    masks = generate_saliency(archive, images, OracleSaliencyProvider())
    assert len(label_archive(archive, masks)) == sum(not is_flagged(m) for m in masks) == len(records)


def test_records_round_trip(small_dataset, tmp_path):
    spec, paths = small_dataset
    records = load_manifest(paths["train"])[:6]
    images = {r.id: r.load() for r in records}
    archive = _archive_from(records, category=2)
    recs = label_archive(archive, generate_saliency(archive, images, OracleSaliencyProvider()))
    path = save_records(recs, tmp_path / "out", {r.id: r.image_path for r in records},
                        spec.catalog())
    back = load_records(path)
    assert [(r.image_id, r.category_index, r.provenance) for r in back] == \
        [(r.image_id, r.category_index, r.provenance) for r in recs]
    assert all(a.mask == b.mask for a, b in zip(back, recs))
    assert isinstance(spec.catalog(), CategoryCatalog)
