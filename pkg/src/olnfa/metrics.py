"""Object-level detection metrics: greedy matching, P/R/F1 and all-point AP."""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .boxes import iou_matrix

__all__ = [
    "MatchResult",
    "Metrics",
    "MetricsReport",
    "match",
    "precision_recall_f1",
    "average_precision",
    "evaluate_predictions",
    "write_results_table",
]

DEFAULT_IOU = 0.25


@dataclass
class MatchResult:
    tp: list[int] = field(default_factory=list)        # prediction indices
    fp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)        # ground-truth indices
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


def match(pred_boxes, gt_boxes, iou_threshold: float = DEFAULT_IOU, scores=None) -> MatchResult:
    """Greedy one-to-one matching.

    Predictions are visited by descending score (stable, so ties keep their
    index order; with ``scores=None`` the given order is used). Each claims
    the unclaimed ground truth of highest IoU when that IoU reaches
    ``iou_threshold``; otherwise it is a false positive.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    order = (np.arange(len(pred_boxes)) if scores is None
             else np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable"))
    res = MatchResult()
    iou = iou_matrix(pred_boxes, gt_boxes) if len(pred_boxes) and len(gt_boxes) else None
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in order:
        if iou is not None:
            cand = np.where(taken, -1.0, iou[i])
            j = int(np.argmax(cand))
            if cand[j] >= iou_threshold:
                taken[j] = True
                res.tp.append(int(i))
                res.pairs.append((int(i), j, float(iou[i, j])))
                continue
        res.fp.append(int(i))
    res.fn = [int(j) for j in np.flatnonzero(~taken)]
    return res


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Counts to (P, R, F1). No predictions at all gives precision 1.0."""
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> float:
    """Area under the precision-recall curve, all-point interpolation.

    One curve point per distinct score (tied scores enter together);
    precision is replaced by its running maximum from the high-recall end.
    """
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], is_tp[order]
    ctp = np.cumsum(t)
    cfp = np.cumsum(~t)
    last = np.r_[s[1:] != s[:-1], True]       # end of each tie group
    recall = ctp[last] / n_gt
    precision = ctp[last] / (ctp[last] + cfp[last])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    widths = np.diff(np.r_[0.0, recall])
    return float(np.sum(widths * envelope))


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    ap: float
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def as_row(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "ap": self.ap}


def evaluate_predictions(per_image: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray]],
                         score_threshold: float = 0.5, iou_threshold: float = DEFAULT_IOU) -> Metrics:
    """Metrics over a dataset from ``(pred_boxes, pred_scores, gt_boxes)`` triples.

    AP uses every prediction given; P/R/F1 only those scoring at least
    ``score_threshold``.
    """
    all_scores, all_tp = [], []
    tp = fp = fn = n_gt = 0
    for boxes, scores, gts in per_image:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        n_gt += len(gts)
        full = match(boxes, gts, iou_threshold, scores)
        flags = np.zeros(len(scores), dtype=bool)
        flags[full.tp] = True
        all_scores.append(scores)
        all_tp.append(flags)
        keep = scores >= score_threshold
        op = match(boxes[keep], gts, iou_threshold, scores[keep])
        tp += len(op.tp)
        fp += len(op.fp)
        fn += len(op.fn)
    p, r, f = precision_recall_f1(tp, fp, fn)
    ap = (average_precision(np.concatenate(all_scores) if all_scores else [],
                            np.concatenate(all_tp) if all_tp else [], n_gt) if n_gt else 0.0)
    return Metrics(p, r, f, ap, tp, fp, fn)


@dataclass
class MetricsReport:
    """Per-fold metrics for one head at one shot count, with fold statistics."""

    head: str
    k: int | str
    folds: list[Metrics] = field(default_factory=list)

    def _stack(self):
        return {key: [float(m.as_row()[key]) for m in self.folds]
                for key in ("precision", "recall", "f1", "ap")}

    @property
    def mean(self) -> dict:
        return {k: statistics.fmean(v) for k, v in self._stack().items()}

    @property
    def std(self) -> dict:
        # sample standard deviation across folds (exact: identical folds give 0); 0 for a single fold
        return {k: statistics.stdev(v) if len(v) > 1 else 0.0 for k, v in self._stack().items()}


def write_results_table(path, reports: Iterable[MetricsReport], sep: str = "\t") -> None:
    cols = ("precision", "recall", "f1", "ap")
    lines = [sep.join(("head", "k", "fold") + cols)]
    for rep in reports:
        for f, m in enumerate(rep.folds):
            lines.append(sep.join([rep.head, str(rep.k), str(f)] + [f"{m.as_row()[c]:.6f}" for c in cols]))
        for tag, stats in (("mean", rep.mean), ("std", rep.std)):
            lines.append(sep.join([rep.head, str(rep.k), tag] + [f"{stats[c]:.6f}" for c in cols]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
