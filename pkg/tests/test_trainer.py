import math

import numpy as np
import pytest
import torch

from virtual_temporal.core import ExperimentConfig, FeedbackSpec, Frame, FrameSequence, MotionModel, SceneConfig
from virtual_temporal.evaluator import evaluate_temporal
from virtual_temporal.model import build_network, save_checkpoint
from virtual_temporal.sequencer import make_virtual_sequence, sequence_rng
from virtual_temporal.trainer import (
    DivergenceError,
    TrainingError,
    batch_loss,
    loss_gradient_norm,
    lr_at,
    run_sequence,
    run_sequences,
    sequence_loss,
    train,
)

from conftest import random_still

SMALL_SCENE = SceneConfig(frame_width=64, frame_height=48)
MOTION = MotionModel(2.0, 1.0, 1.0, 0.5, (-1, 1), (1,))


def _virtual(seed, n=4, crop=(32, 32), image_id=None):
    rng = np.random.default_rng(seed)
    still = random_still(rng, 48, 64, image_id=image_id or f"s{seed}")
    seq, _ = make_virtual_sequence(still, crop, n, MOTION, sequence_rng(seed, still.image_id))
    return seq


def _config(**kw):
    base = dict(crop_width=32, crop_height=32, frames=4, base_channels=2, epochs=2, batch_size=2, scene=SMALL_SCENE)
    base.update(kw)
    return ExperimentConfig(**base)


def test_lr_schedule_values():
    assert lr_at(0) == 0.001
    assert lr_at(99) == 0.001
    assert lr_at(100) == pytest.approx(0.001 * 0.8, abs=0)
    assert lr_at(200) == pytest.approx(0.001 * 0.64, rel=1e-15)
    assert lr_at(499) == 0.001 * 0.8**4


def test_step_lr_matches_formula():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.Adam([p], lr=0.001, betas=(0.8, 0.999))
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=100, gamma=0.8)
    for epoch in range(500):
        assert opt.param_groups[0]["lr"] == pytest.approx(lr_at(epoch), rel=1e-12)
        opt.step()
        sched.step()


def _logits_for(seq, margin=None, seed=0):
    g = torch.Generator().manual_seed(seed)
    out = []
    for f in seq.frames:
        h, w = f.image.shape[:2]
        if margin is None:
            out.append(torch.randn(1, 3, h, w, generator=g))
        else:
            onehot = torch.nn.functional.one_hot(torch.from_numpy(f.mask.astype(np.int64)), 3).permute(2, 0, 1)
            out.append(margin * onehot[None].double())
    return out


def test_constant_frame_losses_average():
    seq = _virtual(0)
    logits = [torch.zeros(1, 3, 32, 32)] * 4
    report = sequence_loss(logits, seq)
    assert report.frames_contributing == 4
    assert report.sequence_loss == pytest.approx(math.log(3))
    assert all(v == pytest.approx(math.log(3)) for v in report.per_frame)


def test_last_frame_only_mode():
    seq = _virtual(1)
    logits = _logits_for(seq)
    last = sequence_loss(logits, seq, "LastFrameOnly")
    full = sequence_loss(logits, seq)
    assert last.frames_contributing == 1
    assert last.per_frame[:3] == [None] * 3
    assert last.sequence_loss == full.per_frame[3]
    assert full.sequence_loss == pytest.approx(np.mean(full.per_frame))


def test_perfect_logits_drive_loss_to_zero():
    seq = _virtual(2)
    losses = [sequence_loss(_logits_for(seq, m), seq).sequence_loss for m in (1.0, 5.0, 20.0, 60.0)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-20


def test_unlabelled_mask_perturbation_has_no_effect():
    seq = _virtual(3)
    logits = _logits_for(seq)
    before = sequence_loss(logits, seq, "LastFrameOnly")
    rng = np.random.default_rng(0)
    for f in seq.frames[:-1]:
        f.mask = rng.integers(0, 3, f.mask.shape).astype(np.uint8)
    after = sequence_loss(logits, seq, "LastFrameOnly")
    assert after.sequence_loss == before.sequence_loss


def test_unlabelled_sequence_cannot_train():
    img = np.zeros((32, 32, 3), np.uint8)
    seq = FrameSequence([Frame(img, np.zeros((32, 32), np.uint8), (0, 0))], True, (1, 1), "x")
    seq.frames[0].mask = None
    with pytest.raises(TrainingError, match="no labelled frame"):
        sequence_loss([torch.zeros(1, 3, 32, 32)], seq)


def test_mixed_label_patterns_rejected():
    a = _virtual(4, n=2)
    last = a.frames[-1]
    b = FrameSequence([Frame(a.frames[0].image, None, (0, 0)), last], False, (1, 1), "b")
    with pytest.raises(TrainingError, match="pattern"):
        batch_loss([torch.zeros(2, 3, 32, 32)] * 2, [a, b])


def test_single_frame_run_equals_still_forward():
    net = build_network(3, FeedbackSpec(), 4, seed=0).eval()
    seq = _virtual(5, n=1)
    x = torch.from_numpy(seq.frames[0].image.astype(np.float32) / 255).permute(2, 0, 1)[None]
    with torch.no_grad():
        a = run_sequence(net, seq)[0]
        b, _ = net(x, net.reset_state(1, (32, 32)))
    assert torch.equal(a, b)


def test_reset_isolation_and_order_sensitivity():
    net = build_network(3, FeedbackSpec(), 4, seed=0).eval()
    s, t = _virtual(6), _virtual(7)
    with torch.no_grad():
        run_sequence(net, s)
        after = run_sequence(net, t)
        alone = run_sequence(net, t)
        shuffled = FrameSequence(t.frames[::-1], True, t.direction, t.source_image_id)
        permuted = run_sequence(net, shuffled)
    assert all(torch.equal(a, b) for a, b in zip(after, alone))
    assert not torch.equal(permuted[-1], alone[-1])


def test_crop_mismatch_in_batch():
    with pytest.raises(ValueError):
        run_sequences(build_network(3, FeedbackSpec(), 2, seed=0), [_virtual(8), _virtual(9, crop=(48, 32))])


def test_last_frame_signal_smaller_than_full():
    """Sign test over 30 matched batches: last-frame-only gradients are smaller than all-frame ones."""
    smaller = 0
    for seed in range(30):
        torch.manual_seed(seed)
        net = build_network(3, FeedbackSpec(), 2, seed=seed)
        batch = [_virtual(100 + 2 * seed + i, n=5) for i in range(2)]
        full = loss_gradient_norm(net, batch, "AllFrames")
        last = loss_gradient_norm(net, batch, "LastFrameOnly")
        smaller += last < full
    # one-sided binomial(30, 0.5): P(X >= 20) = 0.049
    assert smaller >= 20


def _train(tmp_path, name, seqs, **kw):
    cfg = _config(**kw)
    return train(
        cfg,
        seqs,
        validate=lambda net: evaluate_temporal(net, seqs)[0],
        out_dir=tmp_path / name,
        evaluate=lambda net: evaluate_temporal(net, seqs)[0],
        echo=False,
    )


def test_two_epoch_bookkeeping(tmp_path):
    seqs = [_virtual(10 + i) for i in range(4)]
    rec = _train(tmp_path, "a", seqs)
    assert len(rec.train_loss) == 2 and len(rec.valid_miou) == 2
    assert rec.best_epoch == int(np.argmax(rec.valid_miou))
    assert (tmp_path / "a" / "best.pt").is_file() and (tmp_path / "a" / "run.json").is_file()
    lines = (tmp_path / "a" / "run.log").read_text().splitlines()
    assert lines[0].startswith("epoch    0") and "lr 0.001" in lines[0]


def test_same_seed_same_curve(tmp_path):
    seqs = [_virtual(20 + i) for i in range(4)]
    a = _train(tmp_path, "a", seqs, seed=3)
    b = _train(tmp_path, "b", seqs, seed=3)
    assert a.train_loss == b.train_loss and a.valid_miou == b.valid_miou


def test_fine_tune_records_parent(tmp_path):
    seqs = [_virtual(30 + i) for i in range(4)]
    parent = tmp_path / "parent.pt"
    save_checkpoint(build_network(3, FeedbackSpec(), 2, seed=0), parent)
    cfg = _config()
    rec = train(cfg, seqs, lambda net: 0.5, tmp_path / "ft", init=parent, echo=False)
    assert rec.config["parent_checkpoint"] == str(parent)


def test_per_epoch_data_source(tmp_path):
    seen = []

    def source(epoch):
        seen.append(epoch)
        return [_virtual(40 + epoch * 4 + i) for i in range(2)]

    train(_config(), source, lambda net: 0.5, tmp_path / "x", echo=False)
    assert seen == [0, 1]


def test_empty_data_and_divergence(tmp_path):
    with pytest.raises(TrainingError, match="no training"):
        train(_config(), [], lambda net: 0.5, tmp_path / "e", echo=False)
    seqs = [_virtual(50 + i) for i in range(2)]
    broken = build_network(3, FeedbackSpec(), 2, seed=0)
    with torch.no_grad():
        broken.head.bias.fill_(float("nan"))
    save_checkpoint(broken, tmp_path / "nan.pt")
    with pytest.raises(DivergenceError, match="epoch 0, batch 0"):
        train(_config(), seqs, lambda net: 0.5, tmp_path / "d", init=tmp_path / "nan.pt", echo=False)
