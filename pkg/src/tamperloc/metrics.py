"""Evaluation metrics: binary classification, box grounding, token grounding.

Pure numpy; every function consumes plain predictions and ground truth, so
this module is the only place allowed to look at fine-grained labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .boxes import Box, iou, iou_corners  # re-exported geometry

__all__ = ["Box", "iou", "iou_corners", "grounding_suite", "token_prf",
           "binary_suite", "MetricsReport", "evaluate_predictions"]


@dataclass
class GroundingResult:
    per_sample_iou: np.ndarray
    iou_m: float
    iou50: float
    iou75: float


def grounding_suite(pred_boxes: Sequence[Box | None],
                    gt_boxes: Sequence[Box | None]) -> GroundingResult:
    """Mean IoU and threshold fractions with abstention conventions.

    Conventions: both boxes absent counts as IoU 1 (correct abstention),
    exactly one absent counts as 0.
    """
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError("prediction and ground-truth lists differ in length")
    ious = []
    for pred, gt in zip(pred_boxes, gt_boxes):
        if pred is None and gt is None:
            ious.append(1.0)
        elif pred is None or gt is None:
            ious.append(0.0)
        else:
            ious.append(iou(pred, gt))
    arr = np.asarray(ious, dtype=np.float64)
    if arr.size == 0:
        return GroundingResult(arr, 0.0, 0.0, 0.0)
    return GroundingResult(arr, float(arr.mean()),
                           float((arr >= 0.5).mean()), float((arr >= 0.75).mean()))


def token_prf(pred_sets: Sequence[set[int] | frozenset[int]],
              gt_sets: Sequence[set[int] | frozenset[int]]) -> tuple[float, float, float]:
    """Micro-averaged precision/recall/F1 over per-sample token-index sets."""
    if len(pred_sets) != len(gt_sets):
        raise ValueError("prediction and ground-truth lists differ in length")
    tp = fp = fn = 0
    for pred, gt in zip(pred_sets, gt_sets):
        pred, gt = set(pred), set(gt)
        tp += len(pred & gt)
        fp += len(pred - gt)
        fn += len(gt - pred)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def _average_ranks(x: np.ndarray) -> np.ndarray:
    # 1-based ranks with ties sharing their average rank
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC via the rank statistic; tied scores count half."""
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def equal_error_rate(scores: np.ndarray, labels: np.ndarray) -> float:
    """Operating point where false-accept and false-reject rates coincide,
    linearly interpolated along the ROC."""
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("EER needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    fpr = [0.0]
    fnr = [1.0]
    tp = fp = 0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int((sorted_labels[i:j + 1] == 1).sum())
        fp += (j - i + 1) - int((sorted_labels[i:j + 1] == 1).sum())
        fpr.append(fp / n_neg)
        fnr.append(1.0 - tp / n_pos)
        i = j + 1
    diff = np.asarray(fpr) - np.asarray(fnr)
    k = int(np.argmax(diff >= 0.0))
    if diff[k] == 0.0:
        return float(fpr[k])
    t = (0.0 - diff[k - 1]) / (diff[k] - diff[k - 1])
    return float(fpr[k - 1] + t * (fpr[k] - fpr[k - 1]))


def binary_suite(scores: Sequence[float],
                 labels: Sequence[int]) -> tuple[float | None, float | None, float]:
    """(AUC, EER, accuracy at threshold 0.5); AUC/EER are None for single-class input."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    acc = float(((scores > 0.5).astype(np.int64) == labels).mean()) if scores.size else 0.0
    if len(np.unique(labels)) < 2:
        return None, None, acc
    return roc_auc(scores, labels), equal_error_rate(scores, labels), acc


@dataclass
class MetricsReport:
    """The evaluation columns plus abstention-convention variants and counts.

    The headline iou_* values follow the all-samples convention (correct
    abstention on an authentic image counts as IoU 1); the *_fake variants
    restrict to samples with a ground-truth box.
    """

    auc: float | None
    eer: float | None
    acc: float
    iou_m: float
    iou50: float
    iou75: float
    precision: float
    recall: float
    f1: float
    iou_m_fake: float
    iou50_fake: float
    iou75_fake: float
    eer_percent: float | None
    num_samples: int
    num_fake_image: int
    num_fake_text: int

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(asdict(self), indent=indent)


def evaluate_predictions(scores_multimodal: Sequence[float],
                         labels_multimodal: Sequence[int],
                         pred_boxes: Sequence[Box | None],
                         gt_boxes: Sequence[Box | None],
                         pred_token_sets: Sequence[set[int] | frozenset[int]],
                         gt_token_sets: Sequence[set[int] | frozenset[int]]) -> MetricsReport:
    """Assemble the full report from per-sample predictions and ground truth."""
    auc, eer, acc = binary_suite(scores_multimodal, labels_multimodal)
    grounding_all = grounding_suite(pred_boxes, gt_boxes)
    fake_idx = [i for i, g in enumerate(gt_boxes) if g is not None]
    grounding_fake = grounding_suite([pred_boxes[i] for i in fake_idx],
                                     [gt_boxes[i] for i in fake_idx])
    precision, recall, f1 = token_prf(pred_token_sets, gt_token_sets)
    return MetricsReport(
        auc=auc, eer=eer, acc=acc,
        iou_m=grounding_all.iou_m, iou50=grounding_all.iou50, iou75=grounding_all.iou75,
        precision=precision, recall=recall, f1=f1,
        iou_m_fake=grounding_fake.iou_m, iou50_fake=grounding_fake.iou50,
        iou75_fake=grounding_fake.iou75,
        eer_percent=None if eer is None else 100.0 * eer,
        num_samples=len(pred_boxes),
        num_fake_image=len(fake_idx),
        num_fake_text=sum(1 for g in gt_token_sets if g),
    )
