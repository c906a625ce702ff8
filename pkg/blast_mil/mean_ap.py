"""Mean average precision with greedy IoU matching

Predictions of one class are ranked globally by descending score (ties keep
input order). Walking down the ranking, each prediction claims the unmatched
ground-truth box of the same image with the highest IoU, provided it reaches
the threshold; anything else is a false positive. AP integrates the
interpolated precision-recall curve over every recall step, and mAP is the
unweighted mean over classes that have ground truth.
"""

from __future__ import annotations

from typing import Dict, List, Mapping, NamedTuple, Sequence, Tuple

import logging

import numpy as np

from .core import BoundingBox, box_iou
from .errors import Fatal


__all__ = (
    'CLASS_AGNOSTIC',
    'MapResult',
    'average_precision',
    'class_key',
    'evaluate_map',
    'match_ranked',
)

CLASS_AGNOSTIC = 'cell'

logger = logging.getLogger(__name__)


class MapResult(NamedTuple):
    per_class: Dict[str, float]
    mean_ap: float
    excluded: Tuple[str, ...]
    iou_threshold: float

    def to_json(self) -> Dict[str, object]:
        return {
            'per_class': dict(self.per_class),
            'mAP': self.mean_ap,
            'excluded': list(self.excluded),
            'iou_threshold': self.iou_threshold,
        }


def class_key(box: BoundingBox, class_names: Sequence[str]) -> str:
    if tuple(class_names) == (CLASS_AGNOSTIC,) or box.cell_class is None:
        return CLASS_AGNOSTIC
    return box.cell_class.value


def match_ranked(
    ranked: Sequence[Tuple[str, BoundingBox]],
    ground_truth: Mapping[str, Sequence[BoundingBox]],
    iou_threshold: float,
) -> List[bool]:
    """True-positive flag for each (image_id, box) in rank order"""
    claimed: Dict[str, List[bool]] = {
        image_id: [False] * len(boxes) for image_id, boxes in ground_truth.items()
    }
    flags = []
    for image_id, box in ranked:
        gt_boxes = ground_truth.get(image_id, ())
        best, best_iou = -1, iou_threshold
        for index, gt in enumerate(gt_boxes):
            if claimed[image_id][index]:
                continue
            iou = box_iou(box, gt)
            if iou >= best_iou:
                best, best_iou = index, iou
        if best >= 0:
            claimed[image_id][best] = True
        flags.append(best >= 0)
    return flags


def average_precision(tp_flags: Sequence[bool], n_ground_truth: int) -> float:
    if n_ground_truth <= 0:
        raise ValueError('average precision needs at least one ground-truth box')
    if not tp_flags:
        return 0.0

    tp = np.asarray(tp_flags, dtype=np.float64)
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    interpolated = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(interpolated * tp) / n_ground_truth)


def evaluate_map(
    detections: Mapping[str, Sequence[BoundingBox]],
    ground_truth: Mapping[str, Sequence[BoundingBox]],
    class_names: Sequence[str],
    iou_threshold: float = 0.5,
) -> MapResult:
    if not 0.0 <= iou_threshold <= 1.0:
        raise Fatal(f'IoU threshold {iou_threshold} outside [0, 1]')

    per_class: Dict[str, float] = {}
    excluded: List[str] = []

    for name in class_names:
        gt_by_image = {
            image_id: [b for b in boxes if class_key(b, class_names) == name]
            for image_id, boxes in ground_truth.items()
        }
        n_gt = sum(len(b) for b in gt_by_image.values())
        if n_gt == 0:
            excluded.append(name)
            continue

        candidates = [
            (image_id, box)
            for image_id, boxes in detections.items()
            for box in boxes
            if class_key(box, class_names) == name
        ]
        order = sorted(range(len(candidates)), key=lambda i: -candidates[i][1].score)
        ranked = [candidates[i] for i in order]

        flags = match_ranked(ranked, gt_by_image, iou_threshold)
        per_class[name] = average_precision(flags, n_gt)

    if excluded:
        logger.warning(
            'classes without ground truth excluded from mAP',
            extra={'excluded': excluded},
        )

    if not per_class:
        raise Fatal('no ground-truth boxes to evaluate against')

    mean_ap = float(np.mean(list(per_class.values())))
    return MapResult(per_class, mean_ap, tuple(excluded), iou_threshold)
