from __future__ import annotations

from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase
import warnings

import numpy as np
import torch

from .baggen import CellPools
from .checkpoint import save_checkpoint
from .core import CellClass, Diagnosis, PatientBag
from .errors import CheckpointError, DimensionMismatch, Fatal
from .features import build_extractor
from .model import (
    AggregatorClassifier,
    GroundTruthClassifier,
    Stage1CellClassifier,
    TrainConfig,
    load_model,
    predict_patient,
    split_training_pools,
    train_stage1,
    train_stage2,
)
from .rng import seeded_rng, spawn_rngs
from .synth import SynthConfig, generate_patient


class AggregatorTest(TestCase):
    def setUp(self) -> None:
        torch.manual_seed(0)

    def test_gradients_in_double_precision(self) -> None:
        model = AggregatorClassifier(4, activation='none').double()
        mask = torch.tensor([[False, False, True]])

        def logits(features: torch.Tensor) -> torch.Tensor:
            return model(features, mask)[1]

        features = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
        self.assertTrue(
            torch.autograd.gradcheck(logits, (features,), eps=1e-6, atol=1e-4)
        )

    def test_blank_slots_are_ignored(self) -> None:
        model = AggregatorClassifier(4).eval()
        mask = torch.tensor([[False, True, False]])
        clean = torch.randn(1, 3, 4)
        clean[0, 1] = 0.0
        noisy = clean.clone()
        noisy[0, 1] = 50.0
        with torch.no_grad():
            self.assertTrue(torch.equal(model(clean, mask)[1], model(noisy, mask)[1]))

    def test_skip_mode_matches_a_compacted_sequence(self) -> None:
        model = AggregatorClassifier(4, mask_mode='skip').eval()
        cells = torch.randn(1, 2, 4)
        padded = torch.zeros(1, 3, 4)
        padded[0, 0], padded[0, 2] = cells[0, 0], cells[0, 1]
        with torch.no_grad():
            a = model(padded, torch.tensor([[False, True, False]]))[1]
            b = model(cells, torch.tensor([[False, False]]))[1]
        self.assertTrue(torch.allclose(a, b, atol=1e-6))

    def test_output_shapes(self) -> None:
        patient, logits = AggregatorClassifier(4)(
            torch.randn(5, 7, 4), torch.zeros(5, 7, dtype=torch.bool)
        )
        self.assertEqual(tuple(patient.shape), (5, 64))
        self.assertEqual(tuple(logits.shape), (5, 2))

    def test_dimension_mismatch(self) -> None:
        with self.assertRaises(DimensionMismatch):
            AggregatorClassifier(4)(
                torch.randn(1, 2, 5), torch.zeros(1, 2, dtype=torch.bool)
            )


class TrainConfigTest(TestCase):
    def test_invalid_combinations(self) -> None:
        cases = [
            (dict(stage=3), 'stage must be 1 or 2'),
            (dict(stage=1, length=5), 'length-1'),
            (dict(stage=1, from_scratch=True), 'from_scratch'),
            (dict(stage=2, length=0), 'sequence length'),
            (dict(early_stop_metric='loss'), 'early-stop'),
        ]
        for kwargs, pattern in cases:
            with self.subTest(kwargs=kwargs), self.assertRaisesRegex(Fatal, pattern):
                TrainConfig(**kwargs)

    def test_default_lengths(self) -> None:
        self.assertEqual(TrainConfig(stage=1).sequence_length, 1)
        self.assertEqual(TrainConfig(stage=2).sequence_length, 15)


class TrainingTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        config = SynthConfig(blast_fraction=0.5)
        _, bag = generate_patient(config, Diagnosis.ALL, 6, seeded_rng(0), 'train')
        cls.pools = CellPools.from_crops(bag.cells)
        cls.extractor = build_extractor('toy_cnn')
        small = dict(epochs=1, sequences_per_epoch=16, batch_size=8, augment=False)
        cls.stage1 = train_stage1(
            cls.pools, TrainConfig(stage=1, **small), cls.extractor, seeded_rng(1)
        )
        cls.stage2_config = TrainConfig(
            stage=2, length=4, validation_sequences=8, **small
        )
        _, cls.test_bag = generate_patient(
            config, Diagnosis.ALL, 2, seeded_rng(2), 'test'
        )

    def test_stage1_checkpoint(self) -> None:
        checkpoint = self.stage1.checkpoint
        self.assertEqual(checkpoint.stage, 1)
        self.assertEqual(checkpoint.extractor_digest, self.extractor.digest())
        self.assertEqual(len(self.stage1.history), 1)
        self.assertIsNotNone(self.stage1.holdout_accuracy)

    def test_stage2_from_stage1(self) -> None:
        result = train_stage2(
            self.pools,
            self.stage2_config,
            self.stage1.checkpoint,
            self.extractor,
            seeded_rng(3),
        )
        self.assertEqual(result.checkpoint.stage, 2)
        self.assertEqual(result.model.sequence_length, 4)
        self.extractor.verify_frozen()

        with self.assertRaisesRegex(CheckpointError, 'stage-1'):
            train_stage2(
                self.pools,
                self.stage2_config,
                result.checkpoint,
                self.extractor,
                seeded_rng(3),
            )

    def test_stage2_needs_an_init(self) -> None:
        with self.assertRaisesRegex(Fatal, 'stage-1 checkpoint'):
            train_stage2(
                self.pools, self.stage2_config, None, self.extractor, seeded_rng(4)
            )
        scratch = self.stage2_config.replace(from_scratch=True)
        result = train_stage2(self.pools, scratch, None, self.extractor, seeded_rng(4))
        self.assertEqual(result.checkpoint.stage, 2)

    def test_training_is_reproducible(self) -> None:
        config = TrainConfig.from_json(self.stage1.checkpoint.metadata['train_config'])
        again = train_stage1(self.pools, config, self.extractor, seeded_rng(1))
        self.assertEqual(
            again.checkpoint.parameter_digest(),
            self.stage1.checkpoint.parameter_digest(),
        )

    def test_holdout_is_kept_out_of_early_stopping(self) -> None:
        config = TrainConfig(stage=1)
        split = split_training_pools(self.pools, config, seeded_rng(4))
        ids = [set(p.by_id) for p in split]
        self.assertFalse(ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        self.assertEqual(sum(len(p) for p in split), len(self.pools))
        self.assertTrue(split.train.blast_pool and split.train.normal_pool)

        # the stage-1 report scores exactly the holdout cells
        split_rng = spawn_rngs(seeded_rng(1), 3)[0]
        holdout = split_training_pools(self.pools, config, split_rng).holdout
        report = self.stage1.holdout
        assert report is not None
        self.assertEqual(report.tp + report.fp + report.tn + report.fn, len(holdout))

        with self.assertRaisesRegex(Fatal, 'validation_fraction'):
            TrainConfig(validation_fraction=1.0)

    def test_training_loss_is_read_without_grad_warnings(self) -> None:
        config = TrainConfig(
            stage=1, epochs=1, sequences_per_epoch=8, batch_size=4, augment=False
        )
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            train_stage1(self.pools, config, self.extractor, seeded_rng(5))
        self.assertEqual(
            [str(w.message) for w in caught if 'requires_grad' in str(w.message)], []
        )

    def test_single_class_pools(self) -> None:
        normals = CellPools([], self.pools.normal_pool)
        with self.assertRaisesRegex(Fatal, 'both cell classes'):
            train_stage1(normals, TrainConfig(stage=1), self.extractor, seeded_rng(0))

    def test_predict_and_reload(self) -> None:
        model = self.stage1.model
        prediction = predict_patient(model, self.test_bag, self.extractor, length=4)
        self.assertEqual(prediction.probability, max(prediction.per_sequence))
        self.assertEqual(len(prediction.per_sequence), -(-len(self.test_bag) // 4))
        expected = Diagnosis.ALL if prediction.probability > 0.5 else Diagnosis.HEALTHY
        self.assertIs(prediction.label, expected)

        mean = predict_patient(
            model, self.test_bag, self.extractor, aggregation='mean', length=4
        )
        self.assertAlmostEqual(mean.probability, float(np.mean(mean.per_sequence)))

        with TemporaryDirectory(prefix='blast-mil-model') as tmp:
            path = Path(tmp) / 'stage1.ckpt'
            save_checkpoint(self.stage1.checkpoint, path)
            loaded, checkpoint = load_model(path, self.extractor)
        self.assertEqual(checkpoint.stage, 1)
        again = predict_patient(loaded, self.test_bag, self.extractor, length=4)
        np.testing.assert_allclose(
            again.per_sequence, prediction.per_sequence, rtol=1e-6
        )

    def test_predict_argument_checks(self) -> None:
        model = self.stage1.model
        with self.assertRaisesRegex(Fatal, 'empty bag'):
            predict_patient(
                model, PatientBag('p', [], Diagnosis.HEALTHY), self.extractor
            )
        with self.assertRaisesRegex(Fatal, 'aggregation'):
            predict_patient(model, self.test_bag, self.extractor, aggregation='vote')

    def test_cell_classifiers(self) -> None:
        crops = list(self.test_bag.cells[:5])
        truth = GroundTruthClassifier().classify(crops)
        self.assertEqual(truth, [c.cell_class for c in crops])
        classifier = Stage1CellClassifier(self.stage1.model, self.extractor)
        predicted = classifier.classify(crops)
        self.assertEqual(len(predicted), 5)
        self.assertTrue(set(predicted) <= {CellClass.BLAST, CellClass.NORMAL})
