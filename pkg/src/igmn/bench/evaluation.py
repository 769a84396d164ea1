"""Frame-level average precision at a fixed IOU threshold."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from ..data_model import BoundingBox, PredictionRecord, iou


@dataclass(frozen=True)
class GroundTruth:
    video_id: str
    clip_index: int
    box: BoundingBox
    classes: tuple  # positive class indices


def ground_truth_from_actors(video_id: str, clips: dict) -> list[GroundTruth]:
    return [GroundTruth(video_id, t, a.box, tuple(a.labels.positives()))
            for t, actors in sorted(clips.items()) for a in actors if a.labels is not None]


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP from a score-sorted true-positive indicator."""
    if num_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def class_ap(predictions: Sequence[PredictionRecord], ground_truth: Sequence[GroundTruth],
             cls: int, iou_threshold: float = 0.5) -> float:
    gts = defaultdict(list)
    for g in ground_truth:
        if cls in g.classes:
            gts[(g.video_id, g.clip_index)].append(g.box)
    num_gt = sum(len(v) for v in gts.values())
    # descending score; ties broken by record key so the result ignores input order
    ranked = sorted(predictions, key=lambda p: (-p.class_scores[cls], p.key()))
    matched = {key: [False] * len(boxes) for key, boxes in gts.items()}
    tp = np.zeros(len(ranked))
    for r, p in enumerate(ranked):
        key = (p.video_id, p.clip_index)
        boxes = gts.get(key, [])
        best, best_j = -1.0, -1
        for j, box in enumerate(boxes):
            if matched[key][j]:
                continue
            o = iou(p.box, box)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_threshold:
            matched[key][best_j] = True
            tp[r] = 1.0
    return average_precision(tp, num_gt)


def frame_map(predictions: Sequence[PredictionRecord], ground_truth: Sequence[GroundTruth],
              iou_threshold: float = 0.5, class_subset: Optional[Iterable[int]] = None):
    """Per-class AP and their mean; classes without ground truth are left out."""
    if class_subset is None:
        num = len(predictions[0].class_scores) if predictions else 0
        num = max([num] + [max(g.classes) + 1 for g in ground_truth if g.classes])
        class_subset = range(num)
    per_class = {}
    for c in class_subset:
        if not any(c in g.classes for g in ground_truth):
            continue
        per_class[c] = class_ap(predictions, ground_truth, c, iou_threshold)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean
