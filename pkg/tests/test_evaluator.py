import json

import numpy as np
import pytest
import torch

from virtual_temporal.core import IGNORE_INDEX, AnnotatedStill, FeedbackSpec, Frame, FrameSequence, load_dataset
from virtual_temporal.evaluator import (
    ConfusionMatrix,
    evaluate_still,
    evaluate_temporal,
    unweighted_miou,
    weighted_miou,
    write_report,
)
from virtual_temporal.model import build_network
from virtual_temporal.sequencer import real_sequences
from virtual_temporal.trainer import run_sequences


def _miou(pred, gt, c=3):
    return weighted_miou(ConfusionMatrix(c).add(pred, gt))


def test_perfect_and_disjoint():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 3, (8, 8))
    assert _miou(gt, gt) == 1.0
    assert _miou(np.ones((4, 4)), np.zeros((4, 4)), 2) == 0.0


def test_toy_four_by_four():
    gt = np.array([[0, 0, 0, 0], [0, 0, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]])
    pred = gt.copy()
    pred[0, :2] = 1  # two class-0 pixels wrong
    pred[2, :2] = 0  # two class-1 pixels wrong
    cm = ConfusionMatrix(2).add(pred, gt)
    assert cm.counts.tolist() == [[6, 2], [2, 6]]
    np.testing.assert_allclose(cm.per_class_iou(), [0.6, 0.6])
    assert weighted_miou(cm) == pytest.approx(0.6, abs=1e-15)


def test_absent_class_and_ignore_label():
    gt = np.array([[0, 0], [1, IGNORE_INDEX]])
    pred = np.array([[0, 0], [1, 2]])
    cm = ConfusionMatrix(3).add(pred, gt)
    assert cm.total == 3
    assert weighted_miou(cm) == 1.0
    assert unweighted_miou(cm) == 1.0


def test_empty_and_bad_inputs():
    with pytest.raises(ValueError, match="empty"):
        weighted_miou(ConfusionMatrix(3))
    with pytest.raises(ValueError):
        ConfusionMatrix(3).add(np.zeros(4), np.full(4, 3))
    with pytest.raises(ValueError):
        ConfusionMatrix(3) + ConfusionMatrix(2)


def test_report_written(tmp_path):
    cm = ConfusionMatrix(3).add(np.array([0, 1, 2, 2]), np.array([0, 1, 2, 1]))
    doc = write_report(cm, tmp_path / "r.json", ["soil", "crop", "weed"])
    assert json.loads((tmp_path / "r.json").read_text()) == doc
    assert doc["classes"][2]["name"] == "weed" and doc["total_pixels"] == 4


def _background_net(num_classes=3):
    net = build_network(num_classes, None, 2, seed=0)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.copy_(torch.tensor([5.0] + [0.0] * (num_classes - 1)))
    return net


def test_constant_background_closed_form(tiny_dataset_dir):
    stills = load_dataset(tiny_dataset_dir).split("eval")
    miou, cm = evaluate_still(_background_net(), stills)
    counts = np.bincount(np.concatenate([s.mask.ravel() for s in stills]), minlength=3)
    p_bg = counts[0] / counts.sum()
    # IoU_bg = |bg| / |all|, other classes score 0
    assert miou == pytest.approx(p_bg * p_bg, abs=1e-12)
    assert evaluate_still(_background_net(), stills)[0] == miou


def test_class_count_mismatch(tiny_dataset_dir):
    stills = load_dataset(tiny_dataset_dir).split("eval")
    with pytest.raises(ValueError, match="classes"):
        evaluate_still(_background_net(4), stills, num_classes=3)


def test_single_frame_sequences_match_still(tiny_dataset_dir):
    stills = load_dataset(tiny_dataset_dir).split("valid")
    net = build_network(3, FeedbackSpec(), 4, seed=2)
    seqs = [FrameSequence([Frame(s.image, s.mask, (0, 0))], True, (1, 1), s.image_id) for s in stills]
    a, cm_a = evaluate_still(net, stills)
    b, cm_b = evaluate_temporal(net, seqs)
    assert a == b and np.array_equal(cm_a.counts, cm_b.counts)


def test_temporal_scoring_oracle(tiny_dataset_dir):
    ds = load_dataset(tiny_dataset_dir)
    seqs = real_sequences(ds, "valid", 3)
    net = build_network(3, FeedbackSpec(), 4, seed=2).eval()
    _, cm = evaluate_temporal(net, seqs, batch_size=3)
    expected = np.zeros((3, 3), dtype=np.int64)
    with torch.no_grad():
        for s in seqs:
            pred = run_sequences(net, [s])[-1].argmax(1)[0].numpy()
            gt = s.frames[-1].mask
            for i in range(3):
                for j in range(3):
                    expected[i, j] += int(np.sum((gt == i) & (pred == j)))
    assert np.array_equal(cm.counts, expected)


def test_temporal_requires_final_label():
    img = np.zeros((16, 16, 3), np.uint8)
    seq = FrameSequence([Frame(img, None, (0, 0)), Frame(img, np.zeros((16, 16), np.uint8), (0, 0))], False, (1, 1), "x")
    seq.frames[-1].mask = None
    with pytest.raises(ValueError, match="final frame"):
        evaluate_temporal(build_network(3, FeedbackSpec(), 2, seed=0), [seq])
