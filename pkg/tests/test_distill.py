from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from archiveseg.datamodel import IGNORE, CategoryCatalog, LabelMask, Provenance, PseudoLabelRecord
from archiveseg.distill import (IMAGENET_S_POLICY, ResizePolicy, TrainConfig, augment,
                                color_jitter, copy_paste, crop_or_pad, fit, make_batch, poly_lr,
                                predict, predict_probs, rescale, segmentation_loss,
                                train_distilled)
from archiveseg.evaluation import ConfusionAccumulator, compute_iou
from archiveseg.datamodel import load_manifest
from archiveseg.models import TrainedSegmenter

NO_JITTER = dict(brightness=0.0, contrast=0.0, saturation=0.0)


def test_poly_lr_closed_form():
    cfg = TrainConfig(max_iterations=20000)
    assert poly_lr(0, cfg) == 0.0005
    assert poly_lr(20000, cfg) == 0.0
    assert poly_lr(10000, cfg) == pytest.approx(0.0005 * 0.5 ** 0.9)
    assert poly_lr(10000, cfg) == pytest.approx(2.679e-4, rel=1e-3)
    with pytest.raises(ValueError):
        poly_lr(20001, cfg)


def test_defaults_follow_published_schedule():
    cfg = TrainConfig()
    assert (cfg.lr0, cfg.weight_decay, cfg.max_iterations, cfg.batch_size, cfg.n_max) == \
        (0.0005, 0.0002, 20000, 8, 2)


class FixedDraw:
    """Stand-in generator whose integer draw is fixed."""

    def __init__(self, n):
        self.n = n

    def integers(self, lo, hi):
        return self.n


def test_copy_paste_single_draw_is_identity():
    base = (np.random.default_rng(0).random((8, 8, 3)), np.ones((8, 8), np.uint8))
    donor = (np.zeros((8, 8, 3)), np.full((8, 8), 2, np.uint8))
    out = copy_paste(base, [donor], FixedDraw(1), n_max=2)
    assert out[0] is base[0] and out[1] is base[1]


def test_copy_paste_pixel_accounting():
    base = (np.zeros((8, 8, 3)), np.zeros((8, 8), np.uint8))
    d_px = np.zeros((8, 8, 3))
    d_lb = np.zeros((8, 8), np.uint8)
    spots = [(1, 1), (2, 5), (6, 3), (7, 7)]
    for y, x in spots:
        d_lb[y, x] = 2
        d_px[y, x] = [0.2, 0.4, 0.6]
    px, lb = copy_paste(base, [(d_px, d_lb)], FixedDraw(2), n_max=2)
    assert sorted(map(tuple, np.argwhere(lb == 2))) == spots
    assert (lb != 0).sum() == 4
    for y, x in spots:
        assert px[y, x].tolist() == [0.2, 0.4, 0.6]
    assert base[1].sum() == 0


def test_copy_paste_ignores_donor_ignore_pixels():
    base = (np.zeros((4, 4, 3)), np.ones((4, 4), np.uint8))
    donor = (np.ones((4, 4, 3)), np.full((4, 4), IGNORE, np.uint8))
    px, lb = copy_paste(base, [donor], FixedDraw(2), n_max=2)
    assert (lb == 1).all() and (px == 0).all()


def test_zero_strength_augment_is_identity():
    rng = np.random.default_rng(0)
    px = rng.random((10, 12, 3)).astype(np.float32)
    lb = rng.integers(0, 3, (10, 12)).astype(np.uint8)
    cfg = TrainConfig(scale_range=(1.0, 1.0), crop_size=(10, 12), **NO_JITTER)
    out_px, out_lb = augment(px, lb, rng, cfg)
    assert np.array_equal(out_px, px) and np.array_equal(out_lb, lb)


def test_color_jitter_leaves_labels_alone():
    rng = np.random.default_rng(1)
    px = rng.random((10, 10, 3)).astype(np.float32)
    lb = rng.integers(0, 4, (10, 10)).astype(np.uint8)
    cfg = TrainConfig(scale_range=(1.0, 1.0), crop_size=(10, 10), brightness=0.5, contrast=0.5,
                      saturation=0.5)
    out_px, out_lb = augment(px, lb, rng, cfg)
    assert np.array_equal(np.bincount(out_lb.ravel()), np.bincount(lb.ravel()))
    assert not np.array_equal(out_px, px)
    assert out_px.min() >= 0 and out_px.max() <= 1


def test_upscale_then_center_crop_quadruples_object():
    px = np.zeros((32, 32, 3), np.float32)
    lb = np.zeros((32, 32), np.uint8)
    lb[12:20, 12:20] = 1
    big_px, big_lb = rescale(px, lb, 2.0)
    _, crop = crop_or_pad(big_px, big_lb, (32, 32), (16, 16))
    assert (crop == 1).sum() == 4 * (lb == 1).sum()


def test_crop_or_pad_fills_outside_with_ignore():
    px = np.ones((4, 4, 3), np.float32)
    lb = np.zeros((4, 4), np.uint8)
    out_px, out_lb = crop_or_pad(px, lb, (6, 6), (-1, -2))
    assert (out_lb == IGNORE).sum() == 36 - 16
    assert (out_px[out_lb == IGNORE] == 0).all()
    assert (out_px[out_lb == 0] == 1).all()


def test_batches_are_reproducible():
    rng = np.random.default_rng(2)
    samples = [(rng.random((16, 16, 3)).astype(np.float32),
                (rng.random((16, 16)) > 0.5).astype(np.uint8)) for _ in range(5)]
    cfg = TrainConfig(crop_size=(12, 12), batch_size=3)
    a, b = make_batch(samples, 7, cfg), make_batch(samples, 7, cfg)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    c = make_batch(samples, 8, cfg)
    assert not torch.equal(a[0], c[0])
    assert tuple(a[0].shape) == (3, 3, 12, 12) and a[1].dtype == torch.int64


def test_loss_ignores_ignore_pixels():
    torch.manual_seed(0)
    logits = torch.randn(2, 3, 5, 5)
    target = torch.randint(0, 3, (2, 5, 5))
    target[:, :2] = IGNORE
    base = segmentation_loss(logits, target)
    changed = logits.clone()
    changed[:, :, :2] = torch.randn(2, 3, 2, 5) * 10
    assert torch.equal(segmentation_loss(changed, target), base)
    assert float(segmentation_loss(logits, torch.full((2, 5, 5), IGNORE))) == 0.0


def _tiny_model(classes=3):
    return fit([(np.zeros((8, 8, 3), np.float32), np.zeros((8, 8), np.uint8))], classes,
               TrainConfig(max_iterations=1, crop_size=(8, 8), batch_size=1, width=8))


@pytest.mark.parametrize("hw", [(7, 9), (16, 16), (33, 20)])
def test_prediction_keeps_input_size(hw):
    model = _tiny_model()
    img = np.random.default_rng(0).random((*hw, 3)).astype(np.float32)
    for policy in (ResizePolicy(), ResizePolicy("long_side", 24), ResizePolicy("short_side", 12)):
        hard, soft = predict(model, img, policy)
        assert hard.shape == hw and soft.shape == (*hw, 3)
        assert np.array_equal(hard.labels, soft.argmax(axis=2))
        assert np.allclose(soft.sum(axis=2), 1.0, atol=1e-5)


def test_long_side_policy():
    assert IMAGENET_S_POLICY.target(300, 600) == (512, 1024)
    assert IMAGENET_S_POLICY.target(800, 400) == (1024, 512)
    assert ResizePolicy().target(5, 7) == (5, 7)


def test_checkpoint_round_trip(tmp_path):
    model = _tiny_model()
    model.save(tmp_path / "m.pt")
    back = TrainedSegmenter.load(tmp_path / "m.pt")
    img = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    assert np.array_equal(predict_probs(model, img), predict_probs(back, img))
    assert back.metadata == model.metadata


def test_training_log_lines(tmp_path):
    samples = [(np.zeros((8, 8, 3), np.float32), np.zeros((8, 8), np.uint8))]
    fit(samples, 2, TrainConfig(max_iterations=25, crop_size=(8, 8), batch_size=1, width=8,
                                log_every=10), log_path=tmp_path / "log.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [x["iteration"] for x in lines] == [0, 10, 20, 24]
    assert lines[0]["lr"] == 0.0005


def test_overfits_ten_synth_records(small_dataset):
    spec, paths = small_dataset
    catalog = spec.catalog()
    records = load_manifest(paths["train"])[:10]
    samples = [r.load(catalog.num_classes) for r in records]
    corpus = [PseudoLabelRecord(s.id, LabelMask.binary((s.gt_mask.labels != 0)
                                                       & (s.gt_mask.labels != IGNORE)),
                                catalog.index(r.category), Provenance.SALIENCY)
              for s, r in zip(samples, records)]
    cfg = TrainConfig(max_iterations=500, lr0=0.005, crop_size=(32, 32), scale_range=(1.0, 1.0),
                      copy_paste_enabled=False, **NO_JITTER)
    model = train_distilled(corpus, catalog, cfg, {s.id: s.pixels for s in samples})
    acc = ConfusionAccumulator(catalog.num_classes)
    for s in samples:
        acc.accumulate(predict(model, s)[0], s.gt_mask)
    assert compute_iou(acc)[1] >= 0.95


def test_distill_rejects_unknown_category():
    rec = PseudoLabelRecord("a", LabelMask.binary(np.eye(4)), 5, Provenance.SALIENCY)
    with pytest.raises(ValueError):
        train_distilled([rec], CategoryCatalog(["x", "y"]), TrainConfig(), {"a": np.zeros((4, 4, 3))})


@pytest.mark.parametrize("kw", [dict(lr0=0), dict(n_max=0), dict(scale_range=(2.0, 1.0)),
                                dict(crop_size=(0, 4)), dict(brightness=-0.1)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_from_dict():
    cfg = TrainConfig.from_dict({"crop_size": [4, 4], "n_max": 3})
    assert cfg.crop_size == (4, 4) and TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert color_jitter(np.ones((2, 2, 3)), np.random.default_rng(0),
                        TrainConfig(**NO_JITTER)).sum() == 12
