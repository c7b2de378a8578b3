"""Confusion-matrix segmentation metrics.

Rows index the true class, columns the predicted class.  Per-class scores
come straight from the matrix (TP on the diagonal, FP down the column, FN
along the row); any zero denominator scores 0.  Mean scores average over the
classes actually present in the ground truth, so absent classes do not drag
the mean to zero.  Matrices merge by addition, which is what the sharded
evaluator relies on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, List, Union

import numpy as np

from ifwm.errors import ContractError, DataError, GeometryError
from ifwm.tensor import IGNORE_LABEL


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    iou: float


@dataclass
class Summary:
    mf1: float
    miou: float
    pixel_accuracy: float


class ConfusionMatrix:
    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ContractError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, truth: np.ndarray, pred: np.ndarray,
                   ignore_label: int = IGNORE_LABEL) -> None:
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        if truth.shape != pred.shape:
            raise GeometryError(f"truth shape {truth.shape} != pred shape {pred.shape}")
        C = self.num_classes
        t = truth.ravel().astype(np.int64)
        p = pred.ravel().astype(np.int64)
        valid = t != ignore_label
        t = t[valid]
        p = p[valid]
        for name, arr in (("truth", t), ("pred", p)):
            if arr.size and (arr.min() < 0 or arr.max() >= C):
                bad = arr[(arr < 0) | (arr >= C)][0]
                raise DataError(f"{name} label {bad} outside [0, {C})")
        self.counts += np.bincount(t * C + p, minlength=C * C).reshape(C, C)

    def merge(self, other: "ConfusionMatrix") -> None:
        if other.num_classes != self.num_classes:
            raise ContractError(
                f"cannot merge {other.num_classes}-class matrix into {self.num_classes}-class")
        self.counts += other.counts

    # -- scores ------------------------------------------------------------

    def class_scores(self) -> List[ClassScores]:
        out = []
        diag = np.diag(self.counts)
        col = self.counts.sum(axis=0)
        row = self.counts.sum(axis=1)
        for c in range(self.num_classes):
            tp = int(diag[c])
            fp = int(col[c]) - tp
            fn = int(row[c]) - tp
            precision = tp / (tp + fp) if tp + fp else 0.0
            recall = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
            iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
            out.append(ClassScores(precision, recall, f1, iou))
        return out

    def present_classes(self) -> List[int]:
        row = self.counts.sum(axis=1)
        return [c for c in range(self.num_classes) if row[c] > 0]

    def summary(self) -> Summary:
        scores = self.class_scores()
        present = self.present_classes()
        if not present:
            return Summary(0.0, 0.0, 0.0)
        mf1 = sum(scores[c].f1 for c in present) / len(present)
        miou = sum(scores[c].iou for c in present) / len(present)
        total = int(self.counts.sum())
        pa = int(np.trace(self.counts)) / total if total else 0.0
        return Summary(mf1, miou, pa)

    def foreground_iou(self) -> float:
        """Binary convenience: IoU of class 1."""
        if self.num_classes != 2:
            raise ContractError("foreground_iou is defined for 2-class matrices only")
        return self.class_scores()[1].iou


def write_scores_csv(cm: ConfusionMatrix, dest: Union[str, IO[str]]) -> None:
    """Per-class rows then mF1 / mIoU / PA summary rows; floats via repr."""
    own = isinstance(dest, str)
    fh = open(dest, "w", newline="") if own else dest
    try:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["class", "precision", "recall", "f1", "iou"])
        for c, s in enumerate(cm.class_scores()):
            wr.writerow([c, repr(s.precision), repr(s.recall), repr(s.f1), repr(s.iou)])
        summ = cm.summary()
        wr.writerow(["mF1", repr(summ.mf1)])
        wr.writerow(["mIoU", repr(summ.miou)])
        wr.writerow(["PA", repr(summ.pixel_accuracy)])
    finally:
        if own:
            fh.close()
