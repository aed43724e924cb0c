"""Segmentation criteria and the criterion-oriented adaptive loss.

All four criteria (pixel accuracy, mean accuracy, mean IoU, frequency
weighted IoU) derive from one pixel-count confusion matrix. The adaptive
segmentation loss divides the batch cross entropy by the batch value M of
a chosen criterion; M is a stop-gradient scalar (the criteria are
argmax-based), so the gradient is exactly (1/M) times the cross-entropy
gradient.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .tensor import Tensor, softmax

# Lower clamp for M: early batches can score ~0 on IoU-style criteria, which
# would blow up the loss.
M_FLOOR = 1e-3
# Floor inside log() so a fully confident wrong prediction stays finite.
PROB_FLOOR = 1e-12


class Criterion(Enum):
    PACC = "pacc"
    MACC = "macc"
    MIOU = "miou"
    FWIOU = "fwiou"


def confusion(pred_labels: np.ndarray, gt_labels: np.ndarray, n_cl: int) -> np.ndarray:
    """n_cl x n_cl counts; entry [i, j] = pixels of true class i predicted j."""
    pred = np.asarray(pred_labels).reshape(-1)
    gt = np.asarray(gt_labels).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"pred length {pred.size} != gt length {gt.size}")
    if pred.size:
        if pred.min() < 0 or pred.max() >= n_cl:
            raise ValueError(f"predicted labels outside [0, {n_cl})")
        if gt.min() < 0 or gt.max() >= n_cl:
            raise ValueError(f"ground-truth labels outside [0, {n_cl})")
    idx = gt.astype(np.int64) * n_cl + pred.astype(np.int64)
    counts = np.bincount(idx, minlength=n_cl * n_cl)
    return counts.reshape(n_cl, n_cl)


def criterion_value(cm: np.ndarray, which: Criterion) -> float:
    """Criterion in [0, 1] from a confusion matrix. Classes absent from the
    ground truth are excluded from the mAcc/mIoU means."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("criterion_value: confusion matrix has no counts")
    diag = np.diag(cm)
    true_counts = cm.sum(axis=1)
    pred_counts = cm.sum(axis=0)
    present = true_counts > 0

    if which is Criterion.PACC:
        return float(diag.sum() / total)
    if which is Criterion.MACC:
        return float(np.mean(diag[present] / true_counts[present]))
    union = true_counts + pred_counts - diag
    iou = np.zeros_like(diag)
    iou[present] = diag[present] / union[present]
    if which is Criterion.MIOU:
        return float(np.mean(iou[present]))
    if which is Criterion.FWIOU:
        return float((true_counts[present] * iou[present]).sum() / total)
    raise ValueError(f"unknown criterion {which!r}")


def seg_cross_entropy(seg_logits: Tensor, gt_mask: np.ndarray) -> tuple[float, Tensor]:
    """Mean per-pixel cross entropy over [N,C,P,P] logits and {0..C-1} mask.

    Returns (loss, gradient w.r.t. the logits).
    """
    n, c = seg_logits.shape[:2]
    gt = np.asarray(gt_mask)
    if gt.shape != (n,) + seg_logits.shape[2:]:
        raise ValueError(f"mask shape {gt.shape} does not match logits {seg_logits.shape}")
    if gt.min() < 0 or gt.max() >= c:
        raise ValueError(f"mask labels outside [0, {c})")
    # softmax over the channel axis
    q = np.moveaxis(softmax(np.moveaxis(seg_logits, 1, -1)), -1, 1)
    onehot = np.zeros_like(q)
    np.put_along_axis(onehot, gt[:, None], 1.0, axis=1)
    n_pix = gt.size
    loss = float(-(onehot * np.log(np.maximum(q, PROB_FLOOR))).sum() / n_pix)
    grad = (q - onehot) / n_pix
    return loss, grad


def cls_cross_entropy(class_logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Average cross entropy over [N,K] logits and integer labels."""
    n, k = class_logits.shape
    labels = np.asarray(labels).reshape(-1)
    if labels.shape != (n,):
        raise ValueError(f"labels length {labels.size} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside [0, {k})")
    q = softmax(class_logits)
    onehot = np.zeros_like(q)
    onehot[np.arange(n), labels] = 1.0
    loss = float(-(onehot * np.log(np.maximum(q, PROB_FLOOR))).sum() / n)
    grad = (q - onehot) / n
    return loss, grad


@dataclass
class LossReport:
    cross_entropy: float
    M: float
    adaptive_loss: float
    cls_loss: float = 0.0
    joint: float = 0.0


def adaptive_loss(seg_logits: Tensor, gt_mask: np.ndarray,
                  which: Criterion) -> tuple[LossReport, Tensor]:
    """Criterion-oriented adaptive loss: cross_entropy / M with M the batch
    criterion value clamped to [M_FLOOR, 1]. M is constant during backward,
    so the returned gradient is (1/M) * the cross-entropy gradient."""
    n_cl = seg_logits.shape[1]
    pred = np.argmax(seg_logits, axis=1)
    m_raw = criterion_value(confusion(pred, gt_mask, n_cl), which)
    m = min(1.0, max(M_FLOOR, m_raw))
    ce, grad_ce = seg_cross_entropy(seg_logits, gt_mask)
    report = LossReport(cross_entropy=ce, M=m, adaptive_loss=ce / m)
    return report, grad_ce / m


def joint_loss(adaptive: float, cls: float, w: float) -> float:
    """Weighted sum of the segmentation and classification losses."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"joint weight must be in [0, 1], got {w}")
    return w * adaptive + (1.0 - w) * cls


class MetricsLog:
    """Appends one CSV row per training step: step,criterion,ce,M,adaptive,cls,joint."""

    HEADER = ["step", "criterion", "ce", "M", "adaptive", "cls", "joint"]

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.HEADER)

    def write(self, step: int, criterion: Criterion | None, report: LossReport) -> None:
        name = criterion.value if criterion is not None else "ce"
        self._writer.writerow([step, name,
                               f"{report.cross_entropy:.9g}", f"{report.M:.9g}",
                               f"{report.adaptive_loss:.9g}", f"{report.cls_loss:.9g}",
                               f"{report.joint:.9g}"])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
