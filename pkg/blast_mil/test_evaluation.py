from __future__ import annotations

from typing import List

from tempfile import TemporaryDirectory
from unittest import TestCase

import numpy as np
import torch

from .baggen import CellPools
from .core import CellClass, CellCrop, Diagnosis, PatientBag
from .detect import oracle_detector
from .errors import Fatal
from .evaluation import (
    AttackMode,
    AttackSpec,
    ClassSource,
    PartitionSpec,
    apply_attack,
    bags_from_manifest,
    cell_classifier,
    evaluate_bags,
    exclude_training_cells,
    ideal_perceptron_baseline,
    partition_patients,
    predict_bag,
    run_attack_experiment,
)
from .features import build_extractor
from .model import AggregatorClassifier, GroundTruthClassifier
from .rng import seeded_rng
from .synth import SynthConfig, generate_corpus


def cells(prefix: str, n_blast: int, n_normal: int) -> List[CellCrop]:
    kinds = [CellClass.BLAST] * n_blast + [CellClass.NORMAL] * n_normal
    return [
        CellCrop(f'{prefix}/{i}', np.full((8, 8, 3), 20 + i, dtype=np.uint8), kind)
        for i, kind in enumerate(kinds)
    ]


def bag(pid: str, n_blast: int, n_normal: int) -> PatientBag:
    diagnosis = Diagnosis.ALL if n_blast else Diagnosis.HEALTHY
    return PatientBag(pid, cells(pid, n_blast, n_normal), diagnosis)


class PartitionTest(TestCase):
    def test_remainder_is_discarded(self) -> None:
        bags = [bag('a', 3, 8), bag('b', 0, 3)]
        parts = partition_patients(bags, PartitionSpec(4), seeded_rng(0))
        self.assertEqual([p.patient_id for p in parts], ['a#0', 'a#1'])
        self.assertTrue(all(len(p) == 4 for p in parts))
        self.assertEqual(
            [c.crop_id for p in parts for c in p.cells],
            [c.crop_id for c in bags[0].cells[:8]],
        )
        self.assertTrue(all(p.diagnosis is Diagnosis.ALL for p in parts))

    def test_shuffled_partitions_cover_distinct_cells(self) -> None:
        parts = partition_patients(
            [bag('a', 2, 10)], PartitionSpec(3, shuffle=True), seeded_rng(1)
        )
        ids = [c.crop_id for p in parts for c in p.cells]
        self.assertEqual(len(ids), 12)
        self.assertEqual(len(set(ids)), 12)

    def test_invalid_spec(self) -> None:
        with self.assertRaisesRegex(Fatal, 'partition size'):
            PartitionSpec(0)
        with self.assertRaisesRegex(Fatal, 'remainder'):
            PartitionSpec(3, remainder='pad')


class AttackTest(TestCase):
    def test_removals_split_the_bag(self) -> None:
        classifier = GroundTruthClassifier()
        for n_blast, n_normal in ((0, 5), (3, 4), (2, 0)):
            original = bag('p', n_blast, n_normal)
            no_blast = apply_attack(
                original, AttackSpec(AttackMode.REMOVE_BLAST), classifier
            )
            no_normal = apply_attack(
                original, AttackSpec(AttackMode.REMOVE_NORMAL), classifier
            )
            with self.subTest(n_blast=n_blast, n_normal=n_normal):
                self.assertEqual(len(no_blast) + len(no_normal), len(original))
                self.assertEqual(len(no_blast), n_normal)
                self.assertEqual(no_blast.blast_count(), 0)
                self.assertIs(no_blast.diagnosis, original.diagnosis)

    def test_no_attack_is_identity(self) -> None:
        original = bag('p', 1, 1)
        self.assertIs(apply_attack(original, AttackSpec()), original)

    def test_attacks_need_a_classifier(self) -> None:
        with self.assertRaisesRegex(Fatal, 'cell classifier'):
            apply_attack(bag('p', 1, 1), AttackSpec(AttackMode.REMOVE_NORMAL))

    def test_classifier_sources(self) -> None:
        self.assertIsInstance(
            cell_classifier(ClassSource.GROUND_TRUTH), GroundTruthClassifier
        )
        with self.assertRaisesRegex(Fatal, 'two-class detector'):
            cell_classifier(ClassSource.DETECTOR)


class PredictionTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.extractor = build_extractor('toy_cnn')
        torch.manual_seed(0)
        cls.model = AggregatorClassifier(cls.extractor.dim, sequence_length=4).eval()

    def test_empty_bag_is_healthy_and_flagged(self) -> None:
        empty = PatientBag('p', [], Diagnosis.ALL)
        prediction = predict_bag(
            self.model, empty, self.extractor, 'chunk', 'max', None
        )
        self.assertIs(prediction.label, Diagnosis.HEALTHY)
        self.assertTrue(prediction.empty)
        self.assertEqual(prediction.per_sequence, ())

    def test_evaluate_counts_every_patient(self) -> None:
        bags = [bag('a', 2, 3), bag('b', 0, 6), PatientBag('c', [], Diagnosis.HEALTHY)]
        report, predictions = evaluate_bags(
            self.model, bags, self.extractor, name='evaluate', config_digest='cfg'
        )
        self.assertEqual(report.tp + report.fp + report.tn + report.fn, 3)
        self.assertEqual(report.extra['empty_bags'], 1)
        self.assertEqual(report.extra['patients'], 3)
        self.assertEqual([p.patient_id for p in predictions], ['a', 'b', 'c'])
        self.assertIsNotNone(report.started_at)

        with self.assertRaisesRegex(Fatal, 'no patients'):
            evaluate_bags(self.model, [], self.extractor)

    def test_removing_every_cell_collapses_recall(self) -> None:
        bags = [bag('a', 4, 0), bag('b', 5, 0)]
        table = run_attack_experiment(
            self.model,
            bags,
            self.extractor,
            GroundTruthClassifier(),
            seeded_rng(0),
            group_sizes=(None, 2),
        )
        self.assertEqual(len(table.rows), 6)
        self.assertEqual(table.recall(AttackMode.REMOVE_BLAST), 0.0)
        row = [
            r
            for r in table.rows
            if r.group_size == 2 and r.mode is AttackMode.REMOVE_BLAST
        ]
        self.assertEqual(row[0].bags, 4)
        self.assertEqual(row[0].empty_bags, 4)
        self.assertIn(
            ('all', 'remove-normal', table.recall(AttackMode.REMOVE_NORMAL)),
            table.series(),
        )

    def test_attacks_need_positive_patients(self) -> None:
        with self.assertRaisesRegex(Fatal, 'need ALL patients'):
            run_attack_experiment(
                self.model,
                [bag('h', 0, 3)],
                self.extractor,
                GroundTruthClassifier(),
                seeded_rng(0),
            )


class BaselineTest(TestCase):
    def test_blast_counts_separate_patients(self) -> None:
        bags = [bag(f'a{i}', 1 + i % 3, 5 + i) for i in range(6)]
        bags += [bag(f'h{i}', 0, 4 + i) for i in range(6)]
        self.assertEqual(ideal_perceptron_baseline(bags, GroundTruthClassifier()), 1.0)

    def test_needs_both_classes(self) -> None:
        with self.assertRaisesRegex(Fatal, 'both classes'):
            ideal_perceptron_baseline([bag('h', 0, 3)], GroundTruthClassifier())


class ManifestBagsTest(TestCase):
    def test_ground_truth_and_oracle_bags_agree(self) -> None:
        config = SynthConfig(
            image_size=128, cells_per_image=(1, 1), red_cells_per_image=4
        )
        with TemporaryDirectory(prefix='blast-mil-eval') as tmp:
            manifest = generate_corpus(
                config, 3, 3, seeded_rng(0), tmp, test_fraction=0.5
            )
            truth = bags_from_manifest(manifest, 'test')
            oracle = bags_from_manifest(
                manifest, 'test', detector=oracle_detector(manifest)
            )
            everyone = bags_from_manifest(manifest, None)

        self.assertEqual(len(everyone), 6)
        self.assertEqual([b.patient_id for b in truth], [b.patient_id for b in oracle])
        for a, b in zip(truth, oracle):
            self.assertEqual(len(a), 2)
            self.assertEqual([c.crop_id for c in a.cells], [c.crop_id for c in b.cells])
            self.assertIs(a.diagnosis is Diagnosis.ALL, a.blast_count() >= 1)

    def test_training_cells_are_excluded(self) -> None:
        patient = bag('p', 2, 3)
        pools = CellPools.from_crops(patient.cells[:3])
        (kept,) = exclude_training_cells([patient], pools)
        self.assertEqual([c.crop_id for c in kept.cells], ['p/3', 'p/4'])
