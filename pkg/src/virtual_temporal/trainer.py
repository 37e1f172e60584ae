"""Sequence-aware training loop with loss masking, StepLR schedule and best-checkpoint retention."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .core import IGNORE_INDEX, ExperimentConfig, FrameSequence, RunRecord, save_run
from .model import FeedbackUNet, ShapeError, build_network, load_checkpoint, save_checkpoint


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class LossReport:
    per_frame: list[Optional[float]]
    sequence_loss: float
    frames_contributing: int
    tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)


def lr_at(epoch: int, base_lr: float = 0.001, step: int = 100, gamma: float = 0.8) -> float:
    return base_lr * gamma ** (epoch // step)


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32, device="cpu") -> torch.Tensor:
    arr = np.stack(images).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(device=device, dtype=dtype)


def masks_to_tensor(masks: Sequence[np.ndarray], device="cpu") -> torch.Tensor:
    return torch.from_numpy(np.stack(masks).astype(np.int64)).to(device)


def _labelled_frames(seqs: Sequence[FrameSequence], loss_mask_mode: str) -> list[int]:
    pattern = seqs[0].labelled_indices
    for s in seqs[1:]:
        if s.labelled_indices != pattern:
            raise TrainingError("sequences in one batch must share the same labelled-frame pattern")
    if not pattern:
        raise TrainingError("sequence has no labelled frame; cannot train on it")
    if loss_mask_mode == "LastFrameOnly":
        last = len(seqs[0]) - 1
        if last not in pattern:
            raise TrainingError("LastFrameOnly needs the final frame to be labelled")
        return [last]
    return pattern


def batch_loss(
    logits_per_frame: Sequence[torch.Tensor],
    seqs: Sequence[FrameSequence],
    loss_mask_mode: str = "AllFrames",
    class_weights: Optional[torch.Tensor] = None,
) -> LossReport:
    """Cross-entropy averaged over pixels of each labelled frame, then over contributing frames."""
    if len(logits_per_frame) != len(seqs[0]):
        raise TrainingError(f"got {len(logits_per_frame)} logit maps for {len(seqs[0])} frames")
    used = _labelled_frames(seqs, loss_mask_mode)
    per_frame: list[Optional[float]] = [None] * len(logits_per_frame)
    terms = []
    for n in used:
        logits = logits_per_frame[n]
        target = masks_to_tensor([s.frames[n].mask for s in seqs], logits.device)
        loss = F.cross_entropy(logits, target, weight=class_weights, ignore_index=IGNORE_INDEX)
        per_frame[n] = float(loss.detach())
        terms.append(loss)
    total = torch.stack(terms).mean()
    return LossReport(per_frame, float(total.detach()), len(used), total)


def sequence_loss(
    logits_per_frame: Sequence[torch.Tensor], seq: FrameSequence, loss_mask_mode: str = "AllFrames"
) -> LossReport:
    logits = [l if l.dim() == 4 else l.unsqueeze(0) for l in logits_per_frame]
    return batch_loss(logits, [seq], loss_mask_mode)


def run_sequences(
    net: FeedbackUNet, seqs: Sequence[FrameSequence], detach_state: bool = False
) -> list[torch.Tensor]:
    """Reset the feedback state, then feed frames 0..N-1 of every sequence in lockstep."""
    lengths = {len(s) for s in seqs}
    sizes = {s.crop_size for s in seqs}
    if len(lengths) != 1 or len(sizes) != 1:
        raise ShapeError("sequences in a batch must share N and crop size")
    p = next(net.parameters())
    h, w = sizes.pop()
    state = net.reset_state(len(seqs), (h, w)) if net.has_feedback else None
    outputs = []
    for n in range(lengths.pop()):
        x = images_to_tensor([s.frames[n].image for s in seqs], p.dtype, p.device)
        logits, state = net(x, state)
        if detach_state and state is not None:
            state.buffer = state.buffer.detach()
        outputs.append(logits)
    return outputs


def run_sequence(net: FeedbackUNet, seq: FrameSequence, detach_state: bool = False) -> list[torch.Tensor]:
    return run_sequences(net, [seq], detach_state)


def loss_gradient_norm(
    net: FeedbackUNet, seqs: Sequence[FrameSequence], loss_mask_mode: str = "AllFrames"
) -> float:
    """L2 norm of the gradient of the summed (not averaged) per-frame loss: the total training signal."""
    net.zero_grad(set_to_none=True)
    logits = run_sequences(net, seqs)
    used = _labelled_frames(seqs, loss_mask_mode)
    total = sum(
        F.cross_entropy(logits[n], masks_to_tensor([s.frames[n].mask for s in seqs]), ignore_index=IGNORE_INDEX)
        for n in used
    )
    total.backward()
    norm = math.sqrt(sum(float((p.grad**2).sum()) for p in net.parameters() if p.grad is not None))
    net.zero_grad(set_to_none=True)
    return norm


def class_frequency_weights(seqs: Sequence[FrameSequence], num_classes: int) -> torch.Tensor:
    counts = np.zeros(num_classes, dtype=np.float64)
    for s in seqs:
        for f in s.frames:
            if f.mask is not None:
                m = f.mask[f.mask != IGNORE_INDEX]
                counts += np.bincount(m.ravel(), minlength=num_classes)[:num_classes]
    inv = 1.0 / np.maximum(counts, 1.0)
    return torch.tensor(inv / inv.sum() * num_classes, dtype=torch.float32)


SequenceSource = Union[Sequence[FrameSequence], Callable[[int], Sequence[FrameSequence]]]


class _Log:
    def __init__(self, path: Optional[Path], echo: bool):
        self.path, self.echo = path, echo

    def __call__(self, line: str) -> None:
        if self.echo:
            print(line, flush=True)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def make_optimizer(net: torch.nn.Module, config: ExperimentConfig):
    """Adam with the configured first-moment decay, stepped down by StepLR once per epoch."""
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate, betas=(config.momentum, 0.999))
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=config.scheduler_step, gamma=config.scheduler_gamma)
    return optimizer, scheduler


def train(
    config: ExperimentConfig,
    data: SequenceSource,
    validate: Callable[[FeedbackUNet], float],
    out_dir: str | Path,
    evaluate: Optional[Callable[[FeedbackUNet], float]] = None,
    init: Optional[str | Path] = None,
    feedback_enabled: bool = True,
    extra_config: Optional[dict] = None,
    echo: bool = True,
) -> RunRecord:
    """Train for ``config.epochs`` epochs and return the run record.

    `data` is either a fixed list of sequences or a callable ``epoch -> sequences`` (fresh virtual
    sequences per epoch). `validate` scores the network after every epoch; the best-scoring weights
    are written to ``best.pt`` and, if `evaluate` is given, re-loaded for the final evaluation.
    `init` names a parent checkpoint to fine-tune from.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = _Log(out_dir / "run.log", echo)
    set_determinism(config.seed)

    feedback = config.feedback if feedback_enabled else None
    if init is not None:
        net = load_checkpoint(init, feedback)
        config = config.replace(parent_checkpoint=str(init))
    else:
        net = build_network(config.num_classes, feedback, config.base_channels, seed=config.seed)
    net.train()

    epoch_data = data if callable(data) else (lambda _epoch, _d=list(data): _d)
    first = list(epoch_data(0))
    if not first:
        raise TrainingError("no training sequences")
    class_weights = class_frequency_weights(first, config.num_classes) if config.class_weighted_loss else None

    optimizer, scheduler = make_optimizer(net, config)
    order_rng = np.random.default_rng(config.seed)
    detach = config.bptt_mode == "Detached"
    B = config.batch_size

    snapshot = config.to_dict()
    snapshot.update(extra_config or {})
    record = RunRecord(config=snapshot)
    ckpt_path = out_dir / "best.pt"
    best = -1.0

    for epoch in range(config.epochs):
        seqs = first if epoch == 0 else list(epoch_data(epoch))
        if not seqs:
            raise TrainingError(f"no training sequences for epoch {epoch}")
        order = order_rng.permutation(len(seqs))
        lr = optimizer.param_groups[0]["lr"]
        t0 = time.time()
        losses = []
        for b, start in enumerate(range(0, len(order), B)):
            batch = [seqs[i] for i in order[start : start + B]]
            logits = run_sequences(net, batch, detach_state=detach)
            report = batch_loss(logits, batch, config.loss_mask_mode, class_weights)
            if not math.isfinite(report.sequence_loss):
                raise DivergenceError(epoch, b, report.sequence_loss)
            optimizer.zero_grad(set_to_none=True)
            report.tensor.backward()
            optimizer.step()
            losses.append(report.sequence_loss)
        scheduler.step()

        miou = float(validate(net))
        net.train()
        record.train_loss.append(float(np.mean(losses)))
        record.valid_miou.append(miou)
        if miou > best:
            best = miou
            record.best_epoch = epoch
            save_checkpoint(net, ckpt_path, {"epoch": epoch, "valid_miou": miou})
        log(
            f"epoch {epoch:4d}  loss {record.train_loss[-1]:.5f}  valid_miou {miou:.4f}  "
            f"lr {lr:.6g}  ({time.time() - t0:.1f}s)"
        )

    record.checkpoint = str(ckpt_path)
    if evaluate is not None and record.best_epoch >= 0:
        best_net = load_checkpoint(ckpt_path, feedback)
        record.eval_miou = float(evaluate(best_net))
        log(f"best epoch {record.best_epoch}  valid_miou {best:.4f}  eval_miou {record.eval_miou:.4f}")
    save_run(record, out_dir / "run.json")
    return record
