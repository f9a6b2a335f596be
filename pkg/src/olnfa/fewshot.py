"""Few-shot protocol: train each head on every fold, score on a fixed test split."""
from __future__ import annotations

import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .detector import HEADS, Detector, DetectorConfig
from .metrics import DEFAULT_IOU, Metrics, MetricsReport, evaluate_predictions, write_results_table
from .synth import Item
from .training import train

log = logging.getLogger(__name__)

# predictions below this score are dropped before AP; exact zeros carry no ranking
AP_MIN_SCORE = 1e-3
# candidate operating points when the threshold is tuned on a validation split
THRESHOLD_GRID = tuple(round(0.05 + 0.01 * i, 2) for i in range(95))

__all__ = ["FewShotError", "collect_detections", "tune_threshold", "evaluate_model",
           "run_fewshot_experiment"]


class FewShotError(RuntimeError):
    pass


def _gt(item: Item) -> np.ndarray:
    return np.array([[a.cx, a.cy, a.w, a.h] for a in item.annotations], dtype=np.float64).reshape(-1, 4)


def collect_detections(model: Detector, items: list[Item], min_score: float = AP_MIN_SCORE,
                       nms_iou: float = 0.5) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """``(pred_boxes, pred_scores, gt_boxes)`` per image, keeping scores >= ``min_score``."""
    triples = []
    for it in items:
        dets = model.detect(it.image, score_threshold=min_score, nms_iou=nms_iou)
        boxes = np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4)
        scores = np.array([d.score for d in dets], dtype=np.float64)
        triples.append((boxes, scores, _gt(it)))
    return triples


def tune_threshold(triples, iou_threshold: float = DEFAULT_IOU, grid=THRESHOLD_GRID) -> float:
    """Operating threshold with the best F1 on ``triples``; the lowest wins ties."""
    best_t, best_f1 = grid[0], -1.0
    for t in grid:
        f1 = evaluate_predictions(triples, t, iou_threshold).f1
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return float(best_t)


def evaluate_model(model: Detector, items: list[Item], score_threshold: float = 0.5,
                   iou_threshold: float = DEFAULT_IOU, nms_iou: float = 0.5) -> Metrics:
    triples = collect_detections(model, items, min(AP_MIN_SCORE, score_threshold), nms_iou)
    return evaluate_predictions(triples, score_threshold, iou_threshold)


def run_fewshot_experiment(config: DetectorConfig, folds: list[list[Item]], test: list[Item], k,
                           heads=HEADS, seed: int = 0, score_threshold: float = 0.5,
                           iou_threshold: float = DEFAULT_IOU, out_path=None,
                           val: list[Item] | None = None) -> dict[str, MetricsReport]:
    """Train ``len(heads) * len(folds)`` models and evaluate each on ``test``.

    Fold ``f`` trains with seed ``seed * 1000 + f`` for every head, so the two
    heads see identical batches and initial backbones. With ``val`` given,
    each model's operating threshold is the F1-best one on ``val`` (see
    :func:`tune_threshold`) instead of ``score_threshold``. A failing run
    aborts the experiment with the fold id in the message.
    """
    if not test:
        raise FewShotError("the test split is empty")
    reports = {}
    for head in heads:
        cfg = replace(config, head=head)
        rep = MetricsReport(head, k)
        for f, fold in enumerate(folds):
            t0 = time.perf_counter()
            try:
                result = train(fold, cfg, seed=seed * 1000 + f)
                threshold = score_threshold
                if val:
                    threshold = tune_threshold(collect_detections(result.model, val), iou_threshold)
                metrics = evaluate_model(result.model, test, threshold, iou_threshold)
            except Exception as exc:
                raise FewShotError(f"head {head} fold {f} (k={k}) failed: {exc}") from exc
            rep.folds.append(metrics)
            log.info("%s k=%s fold %d @%.2f: P %.3f R %.3f F1 %.3f AP %.3f (%.0fs)", head, k, f,
                     threshold, metrics.precision, metrics.recall, metrics.f1, metrics.ap,
                     time.perf_counter() - t0)
        reports[head] = rep
    if out_path is not None:
        write_results_table(Path(out_path), reports.values())
    return reports
