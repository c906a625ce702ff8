from __future__ import annotations

from typing import Sequence

from unittest import TestCase

import numpy as np

from .core import BoundingBox, CellClass
from .errors import Fatal
from .mean_ap import average_precision, evaluate_map, match_ranked


def brute_force_ap(flags: Sequence[bool], n_gt: int) -> float:
    precisions = []
    hits = 0
    for rank, flag in enumerate(flags, 1):
        hits += flag
        precisions.append(hits / rank)
    total = 0.0
    for rank, flag in enumerate(flags):
        if flag:
            total += max(precisions[rank:])
    return total / n_gt


def box(x: float, y: float, score: float = 1.0, cell_class=None) -> BoundingBox:
    return BoundingBox(x, y, x + 10, y + 10, score=score, cell_class=cell_class)


class AveragePrecisionTest(TestCase):
    def test_hand_computed(self) -> None:
        # precision 1, 1/2, 2/3 at the three ranks; the last hit lifts the second
        self.assertAlmostEqual(
            average_precision([True, False, True], 2), (1 + 2 / 3) / 2
        )
        self.assertAlmostEqual(average_precision([True, True], 4), 0.5)
        self.assertEqual(average_precision([], 3), 0.0)

    def test_against_brute_force(self) -> None:
        rng = np.random.default_rng(0)
        for trial in range(200):
            n = int(rng.integers(1, 25))
            flags = [bool(f) for f in rng.random(n) < 0.5]
            n_gt = sum(flags) + int(rng.integers(0, 4)) or 1
            with self.subTest(trial=trial):
                self.assertAlmostEqual(
                    average_precision(flags, n_gt), brute_force_ap(flags, n_gt)
                )

    def test_needs_ground_truth(self) -> None:
        with self.assertRaises(ValueError):
            average_precision([True], 0)


class MatchTest(TestCase):
    def test_each_ground_truth_box_matches_once(self) -> None:
        gt = {'a': [box(0, 0)]}
        ranked = [('a', box(0, 0, 0.9)), ('a', box(1, 0, 0.8)), ('b', box(0, 0, 0.7))]
        self.assertEqual(match_ranked(ranked, gt, 0.5), [True, False, False])

    def test_best_overlap_wins(self) -> None:
        gt = {'a': [box(0, 0), box(4, 0)]}
        ranked = [('a', box(4, 0, 0.9)), ('a', box(0, 0, 0.8))]
        self.assertEqual(match_ranked(ranked, gt, 0.5), [True, True])


class EvaluateMapTest(TestCase):
    def test_perfect_detections(self) -> None:
        gt = {
            'a': [
                box(0, 0, cell_class=CellClass.BLAST),
                box(30, 30, cell_class=CellClass.NORMAL),
            ],
            'b': [box(5, 5, cell_class=CellClass.NORMAL)],
        }
        result = evaluate_map(gt, gt, ('BLAST', 'NORMAL'))
        self.assertEqual(result.per_class, {'BLAST': 1.0, 'NORMAL': 1.0})
        self.assertEqual(result.mean_ap, 1.0)

    def test_classes_without_ground_truth_are_excluded(self) -> None:
        gt = {'a': [box(0, 0, cell_class=CellClass.NORMAL)]}
        result = evaluate_map(gt, gt, ('BLAST', 'NORMAL'))
        self.assertEqual(result.excluded, ('BLAST',))
        self.assertEqual(result.mean_ap, 1.0)
        self.assertEqual(result.to_json()['excluded'], ['BLAST'])

    def test_class_agnostic_ignores_labels(self) -> None:
        gt = {'a': [box(0, 0, cell_class=CellClass.BLAST)]}
        detections = {'a': [box(0, 0, 0.5, CellClass.NORMAL)]}
        self.assertEqual(evaluate_map(detections, gt, ('cell',)).mean_ap, 1.0)

    def test_score_ranking(self) -> None:
        gt = {'a': [box(0, 0)]}
        detections = {'a': [box(50, 50, 0.9), box(0, 0, 0.4)]}
        self.assertAlmostEqual(evaluate_map(detections, gt, ('cell',)).mean_ap, 0.5)

    def test_invalid_inputs(self) -> None:
        with self.assertRaisesRegex(Fatal, 'IoU threshold'):
            evaluate_map({}, {}, ('cell',), iou_threshold=1.5)
        with self.assertRaisesRegex(Fatal, 'no ground-truth'):
            evaluate_map({}, {'a': []}, ('cell',))
