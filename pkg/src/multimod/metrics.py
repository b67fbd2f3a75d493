"""Segmentation scoring: confusion accumulation and derived metrics.

Single-label pixels accumulate into a (label, prediction) matrix; per-class
true/false positives and false negatives fall out of its margins.

Multi-label pixels (a set of correct classes per pixel) use a generous
rule: a prediction inside the pixel's label set counts as a true positive
for *every* label in the set; a prediction outside it counts as a false
positive for the predicted class and a false negative for every label in
the set. Overall accuracy is the fraction of pixels whose prediction was in
the set.

Per-class F1 and IoU come from the usual tally formulas. Classes with no
support anywhere (no TP, FP or FN) are excluded from the mean metrics and
reported in the ``absent`` entry; their per-class slots hold NaN.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class Confusion:
    """Running tallies over any number of images."""

    num_classes: int
    multi_label: bool
    matrix: np.ndarray  # (K, K) int64, [label, pred]; zeros when multi-label
    tp: np.ndarray  # (K,) int64
    fp: np.ndarray
    fn: np.ndarray
    correct: int = 0
    total: int = 0

    @classmethod
    def empty(cls, num_classes: int, multi_label: bool = False) -> "Confusion":
        return cls(
            num_classes=num_classes,
            multi_label=multi_label,
            matrix=np.zeros((num_classes, num_classes), dtype=np.int64),
            tp=np.zeros(num_classes, dtype=np.int64),
            fp=np.zeros(num_classes, dtype=np.int64),
            fn=np.zeros(num_classes, dtype=np.int64),
        )

    def update(
        self, pred: np.ndarray, labels: np.ndarray, valid_mask: Optional[np.ndarray] = None
    ) -> None:
        """Accumulate one image. ``pred`` is (H, W) int; ``labels`` is (H, W)
        int, or (K, H, W) 0/1 when this tally is multi-label."""
        if self.multi_label:
            if labels.ndim != 3 or labels.shape[0] != self.num_classes:
                raise ValueError(
                    f"multi-label tally needs (K, H, W) labels, got {labels.shape}"
                )
            if valid_mask is None:
                valid_mask = np.ones(labels.shape[1:], dtype=bool)
            p = pred[valid_mask]  # (P,)
            sets = labels[:, valid_mask].astype(bool)  # (K, P)
            hit = sets[p, np.arange(p.size)]  # prediction inside the set?
            self.correct += int(hit.sum())
            self.total += int(p.size)
            # hits: TP for every label in the set
            self.tp += sets[:, hit].sum(axis=1)
            # misses: FP for the prediction, FN for every label in the set
            self.fp += np.bincount(p[~hit], minlength=self.num_classes)
            self.fn += sets[:, ~hit].sum(axis=1)
            return

        if labels.shape != pred.shape:
            raise ValueError(f"pred {pred.shape} vs labels {labels.shape}")
        if valid_mask is None:
            valid_mask = np.ones(labels.shape, dtype=bool)
        y = labels[valid_mask].astype(np.int64)
        p = pred[valid_mask].astype(np.int64)
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"label id out of range 0..{self.num_classes - 1}")
        if p.size and (p.min() < 0 or p.max() >= self.num_classes):
            raise ValueError(f"prediction id out of range 0..{self.num_classes - 1}")
        k = self.num_classes
        self.matrix += np.bincount(y * k + p, minlength=k * k).reshape(k, k)

    def merge(self, other: "Confusion") -> None:
        if (self.num_classes, self.multi_label) != (other.num_classes, other.multi_label):
            raise ValueError("cannot merge tallies with different layouts")
        self.matrix += other.matrix
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.correct += other.correct
        self.total += other.total

    def tallies(self) -> tuple:
        """(tp, fp, fn, correct, total) regardless of label arity."""
        if self.multi_label:
            return self.tp, self.fp, self.fn, self.correct, self.total
        tp = np.diag(self.matrix).astype(np.int64)
        fn = self.matrix.sum(axis=1) - tp
        fp = self.matrix.sum(axis=0) - tp
        return tp, fp, fn, int(tp.sum()), int(self.matrix.sum())


def compute_metrics(conf: Confusion) -> dict:
    """Overall accuracy, per-class F1/IoU, their means over supported classes.

    Returns ``{"oa", "f1", "iou", "mf1", "miou", "absent"}`` where ``f1`` and
    ``iou`` are per-class arrays with NaN for absent classes, and ``absent``
    lists the excluded class ids.
    """
    tp, fp, fn, correct, total = conf.tallies()
    tp = tp.astype(np.float64)
    fp = fp.astype(np.float64)
    fn = fn.astype(np.float64)
    support = (tp + fp + fn) > 0
    f1 = np.full(conf.num_classes, np.nan)
    iou = np.full(conf.num_classes, np.nan)
    f1[support] = 2 * tp[support] / (2 * tp[support] + fp[support] + fn[support])
    iou[support] = tp[support] / (tp[support] + fp[support] + fn[support])
    absent = [int(c) for c in np.flatnonzero(~support)]
    if absent:
        log.info("classes without support excluded from means: %s", absent)
    return {
        "oa": correct / total if total else float("nan"),
        "f1": f1,
        "iou": iou,
        "mf1": float(np.nanmean(f1)) if support.any() else float("nan"),
        "miou": float(np.nanmean(iou)) if support.any() else float("nan"),
        "absent": absent,
    }
