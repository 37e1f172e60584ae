"""Confusion-matrix accounting, weighted mIoU, and still / temporal evaluation drivers."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .core import IGNORE_INDEX, AnnotatedStill, FrameSequence


class ConfusionMatrix:
    """C x C pixel counts; entry (i, j) counts pixels of true class i predicted as j."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts.astype(np.int64)

    def add(self, pred: np.ndarray, target: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).ravel().astype(np.int64)
        target = np.asarray(target).ravel().astype(np.int64)
        if pred.shape != target.shape:
            raise ValueError(f"prediction has {pred.size} pixels, target {target.size}")
        keep = target != IGNORE_INDEX
        pred, target = pred[keep], target[keep]
        if target.size and (target.max() >= self.num_classes or target.min() < 0):
            raise ValueError(f"target class outside [0, {self.num_classes})")
        if pred.size and (pred.max() >= self.num_classes or pred.min() < 0):
            raise ValueError(f"predicted class outside [0, {self.num_classes})")
        idx = target * self.num_classes + pred
        self.counts += np.bincount(idx, minlength=self.num_classes**2).reshape(self.num_classes, self.num_classes)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_iou(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    def class_weights(self) -> np.ndarray:
        gt = self.counts.sum(axis=1).astype(np.float64)
        return gt / gt.sum()


def weighted_miou(cm: ConfusionMatrix) -> float:
    """Sum of per-class IoU weighted by ground-truth pixel frequency; absent classes drop out."""
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    iou = cm.per_class_iou()
    gt = cm.counts.sum(axis=1).astype(np.float64)
    present = gt > 0
    weights = gt[present] / gt[present].sum()
    return float(np.sum(weights * iou[present]))


def unweighted_miou(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    gt = cm.counts.sum(axis=1)
    return float(np.mean(cm.per_class_iou()[gt > 0]))


def _to_batch(images: Sequence[np.ndarray], device) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(device)


def _check_classes(net, num_classes: int) -> None:
    if net.num_classes != num_classes:
        raise ValueError(f"network predicts {net.num_classes} classes but the masks use {num_classes}")


@torch.no_grad()
def evaluate_still(net, stills: Sequence[AnnotatedStill], num_classes: int | None = None, batch_size: int = 4):
    """One fresh-state forward per image; returns (weighted mIoU, confusion matrix)."""
    num_classes = num_classes or net.num_classes
    _check_classes(net, num_classes)
    was_training = net.training
    net.eval()
    device = next(net.parameters()).device
    cm = ConfusionMatrix(num_classes)
    for i in range(0, len(stills), batch_size):
        chunk = stills[i : i + batch_size]
        x = _to_batch([s.image for s in chunk], device).to(next(net.parameters()).dtype)
        state = net.reset_state(len(chunk), tuple(x.shape[-2:])) if net.has_feedback else None
        logits, _ = net(x, state)
        pred = logits.argmax(dim=1).cpu().numpy()
        for p, s in zip(pred, chunk):
            cm.add(p, s.mask)
    net.train(was_training)
    return weighted_miou(cm), cm


def _group_by_shape(seqs: Sequence[FrameSequence]):
    groups: dict[tuple, list[FrameSequence]] = {}
    for s in seqs:
        groups.setdefault((len(s), s.crop_size), []).append(s)
    return groups.values()


@torch.no_grad()
def evaluate_temporal(net, sequences: Sequence[FrameSequence], num_classes: int | None = None, batch_size: int = 4):
    """Run each sequence from a reset state and score only its final frame."""
    num_classes = num_classes or net.num_classes
    _check_classes(net, num_classes)
    for s in sequences:
        if s.frames[-1].mask is None:
            raise ValueError(f"sequence {s.source_image_id} has no label on its final frame")
    was_training = net.training
    net.eval()
    device = next(net.parameters()).device
    dtype = next(net.parameters()).dtype
    cm = ConfusionMatrix(num_classes)
    for group in _group_by_shape(sequences):
        for i in range(0, len(group), batch_size):
            chunk = group[i : i + batch_size]
            state = net.reset_state(len(chunk), chunk[0].crop_size) if net.has_feedback else None
            for n in range(len(chunk[0])):
                x = _to_batch([s.frames[n].image for s in chunk], device).to(dtype)
                logits, state = net(x, state)
            pred = logits.argmax(dim=1).cpu().numpy()
            for p, s in zip(pred, chunk):
                cm.add(p, s.frames[-1].mask)
    net.train(was_training)
    return weighted_miou(cm), cm


def report(cm: ConfusionMatrix, class_names: Iterable[str] | None = None) -> dict:
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(cm.num_classes)]
    iou = cm.per_class_iou()
    weights = cm.class_weights()
    return {
        "classes": [
            {
                "name": names[i],
                "iou": None if np.isnan(iou[i]) else float(iou[i]),
                "weight": float(weights[i]),
                "gt_pixels": int(cm.counts[i].sum()),
                "predicted_pixels": int(cm.counts[:, i].sum()),
            }
            for i in range(cm.num_classes)
        ],
        "weighted_miou": weighted_miou(cm),
        "unweighted_miou": unweighted_miou(cm),
        "total_pixels": cm.total,
        "confusion": cm.counts.tolist(),
    }


def write_report(cm: ConfusionMatrix, path: str | Path, class_names=None) -> dict:
    doc = report(cm, class_names)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return doc
