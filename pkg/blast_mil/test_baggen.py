from __future__ import annotations

from typing import List

from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase

import numpy as np
from scipy import stats

from .baggen import (
    TRAINING_POLICY,
    AugmentationPolicy,
    CellPools,
    augment,
    bag_to_sequences,
    generate_epoch,
    generate_sequence,
    load_epoch,
    save_epoch,
    split_pools,
)
from .core import CellClass, CellCrop, Diagnosis, PatientBag, blank_crop
from .errors import Fatal, InfeasibleConfig, PoolExhausted
from .rng import seeded_rng


def pool(prefix: str, cell_class: CellClass, n: int, size: int = 8) -> List[CellCrop]:
    return [
        CellCrop(
            f'{prefix}{i}', np.full((size, size, 3), 10 + i, dtype=np.uint8), cell_class
        )
        for i in range(n)
    ]


def make_pools(n_blast: int = 20, n_normal: int = 40) -> CellPools:
    return CellPools(
        pool('b', CellClass.BLAST, n_blast), pool('n', CellClass.NORMAL, n_normal)
    )


class PoolsTest(TestCase):
    def test_pools_check_their_classes(self) -> None:
        with self.assertRaisesRegex(ValueError, 'BLAST pool'):
            CellPools(pool('n', CellClass.NORMAL, 1), [])
        with self.assertRaisesRegex(ValueError, 'twice'):
            CellPools(
                pool('x', CellClass.BLAST, 1), [pool('x', CellClass.NORMAL, 1)[0]]
            )

    def test_split_keeps_classes_apart(self) -> None:
        train, holdout = split_pools(make_pools(), 0.25, seeded_rng(0))
        self.assertEqual(len(holdout.blast_pool), 5)
        self.assertEqual(len(holdout.normal_pool), 10)
        self.assertFalse(set(train.by_id) & set(holdout.by_id))
        self.assertEqual(len(train) + len(holdout), 60)


class GenerateSequenceTest(TestCase):
    def test_labels_match_content(self) -> None:
        pools = make_pools()
        sequences = generate_epoch(pools, 10, 400, 0.5, None, seeded_rng(1))
        labels = [s.label for s in sequences]
        self.assertEqual(labels.count(Diagnosis.ALL), 200)
        for seq in sequences:
            blasts = sum(1 for c in seq.cells() if c.cell_class is CellClass.BLAST)
            self.assertEqual(blasts, seq.blast_count)
            self.assertEqual(seq.label is Diagnosis.ALL, blasts >= 1)
            self.assertEqual(len(seq.entries), 10)
            self.assertTrue(3 <= len(seq.cells()) <= 10)

    def test_no_duplicate_cells_within_a_sequence(self) -> None:
        for seq in generate_epoch(make_pools(), 15, 50, 0.5, None, seeded_rng(2)):
            ids = [c.crop_id for c in seq.cells()]
            self.assertEqual(len(ids), len(set(ids)))

    def test_single_witness_position_is_uniform(self) -> None:
        length, trials = 8, 1600
        rng = seeded_rng(3)
        counts = np.zeros(length)
        for _ in range(trials):
            seq = generate_sequence(
                make_pools(), length, Diagnosis.ALL, (1, 1), rng=rng
            )
            position = [i for i, e in enumerate(seq.entries) if not e.is_blank]
            self.assertEqual(len(position), 1)
            counts[position[0]] += 1
        self.assertGreater(stats.chisquare(counts).pvalue, 1e-3)

    def test_same_seed_same_epoch(self) -> None:
        a = generate_epoch(make_pools(), 6, 20, 0.5, None, seeded_rng(4))
        b = generate_epoch(make_pools(), 6, 20, 0.5, None, seeded_rng(4))
        self.assertEqual([s.digest() for s in a], [s.digest() for s in b])

    def test_exhausted_pool(self) -> None:
        pools = make_pools(n_blast=0)
        with self.assertRaisesRegex(PoolExhausted, 'blast pool'):
            generate_sequence(pools, 5, Diagnosis.ALL, rng=seeded_rng(0))

    def test_infeasible_cell_range(self) -> None:
        with self.assertRaises(InfeasibleConfig):
            generate_sequence(
                make_pools(), 5, Diagnosis.HEALTHY, (2, 6), rng=seeded_rng(0)
            )

    def test_epoch_arguments(self) -> None:
        with self.assertRaisesRegex(Fatal, 'balance'):
            generate_epoch(make_pools(), 5, 10, 1.5, None, seeded_rng(0))
        with self.assertRaisesRegex(Fatal, 'at least one'):
            generate_epoch(make_pools(), 5, 0, 0.5, None, seeded_rng(0))


class AugmentTest(TestCase):
    def test_identity_policy(self) -> None:
        crop = pool('b', CellClass.BLAST, 1)[0]
        self.assertIs(augment(crop, AugmentationPolicy(), seeded_rng(0)), crop)

    def test_keeps_identity_and_class(self) -> None:
        crop = CellCrop(
            'b0',
            np.random.default_rng(0).integers(0, 255, (16, 16, 3), dtype=np.uint8),
            CellClass.BLAST,
        )
        out = augment(crop, TRAINING_POLICY, seeded_rng(1))
        self.assertEqual(out.crop_id, 'b0')
        self.assertIs(out.cell_class, CellClass.BLAST)
        self.assertEqual(out.pixels.shape, crop.pixels.shape)

    def test_training_policy_stays_on_the_pixel_grid(self) -> None:
        self.assertTrue(TRAINING_POLICY.is_lossless)
        pixels = np.random.default_rng(2).integers(0, 255, (12, 12, 3), dtype=np.uint8)
        crop = CellCrop('b0', pixels, CellClass.BLAST)
        variants = [
            np.rot90(flipped, k, axes=(0, 1))
            for flipped in (pixels, pixels[:, ::-1])
            for k in range(4)
        ]
        rng = seeded_rng(3)
        for i in range(24):
            with self.subTest(draw=i):
                out = augment(crop, TRAINING_POLICY, rng).pixels
                self.assertTrue(any(np.array_equal(out, v) for v in variants))

    def test_rigid_transforms_add_no_blank_pixels(self) -> None:
        pixels = np.random.default_rng(4).integers(50, 201, (16, 16, 3), dtype=np.uint8)
        crop = CellCrop('b0', pixels, CellClass.BLAST)
        policy = AugmentationPolicy(rotation=(0.0, 360.0), translation=4)
        self.assertFalse(policy.is_lossless)
        rng = seeded_rng(5)
        for i in range(16):
            with self.subTest(draw=i):
                out = augment(crop, policy, rng).pixels
                self.assertGreaterEqual(int(out.min()), 50)
                self.assertLessEqual(int(out.max()), 200)

        full_turn = AugmentationPolicy(rotation=(360.0, 360.0))
        out = augment(crop, full_turn, seeded_rng(6)).pixels.astype(int)
        self.assertLessEqual(int(np.abs(out - pixels.astype(int)).max()), 2)

    def test_blank_crops_are_refused(self) -> None:
        with self.assertRaises(Fatal):
            augment(blank_crop(8), TRAINING_POLICY, seeded_rng(0))


class BagToSequencesTest(TestCase):
    def test_chunks_preserve_order_and_pad(self) -> None:
        cells = pool('n', CellClass.NORMAL, 5) + pool('b', CellClass.BLAST, 2)
        bag = PatientBag('p', cells, Diagnosis.ALL)
        sequences = bag_to_sequences(bag, 3)
        self.assertEqual(len(sequences), 3)
        self.assertEqual(
            [c.crop_id for s in sequences for c in s.cells()],
            [c.crop_id for c in cells],
        )
        self.assertEqual(
            [s.label for s in sequences],
            [Diagnosis.HEALTHY, Diagnosis.ALL, Diagnosis.ALL],
        )
        self.assertEqual(sequences[-1].pad_mask, (False, True, True))

    def test_single_packing(self) -> None:
        bag = PatientBag('p', pool('n', CellClass.NORMAL, 7), Diagnosis.HEALTHY)
        (sequence,) = bag_to_sequences(bag, 3, packing='single')
        self.assertEqual(len(sequence.entries), 7)

    def test_unlabelled_cells_take_the_bag_label(self) -> None:
        cells = [CellCrop('u', np.zeros((8, 8, 3), dtype=np.uint8) + 5)]
        (sequence,) = bag_to_sequences(PatientBag('p', cells, Diagnosis.ALL), 4)
        self.assertEqual(sequence.blast_count, -1)
        self.assertIs(sequence.label, Diagnosis.ALL)

    def test_empty_bag(self) -> None:
        with self.assertRaisesRegex(Fatal, 'empty bag'):
            bag_to_sequences(PatientBag('p', [], Diagnosis.HEALTHY), 4)


class EpochFileTest(TestCase):
    def test_save_and_reload(self) -> None:
        pools = make_pools()
        sequences = generate_epoch(pools, 6, 12, 0.5, None, seeded_rng(5))
        with TemporaryDirectory(prefix='blast-mil-epoch') as tmp:
            path = Path(tmp) / 'epoch.json'
            save_epoch(sequences, path, config_digest='cfg')
            loaded = load_epoch(path, pools)
            self.assertEqual(
                [s.digest() for s in loaded], [s.digest() for s in sequences]
            )

            with self.assertRaisesRegex(Fatal, 'unknown crop'):
                load_epoch(path, make_pools(n_blast=1, n_normal=1))

    def test_unreadable_epoch(self) -> None:
        with TemporaryDirectory() as tmp:
            path = Path(tmp) / 'epoch.json'
            path.write_text('{"version": 7, "sequences": []}')
            with self.assertRaisesRegex(Fatal, 'unsupported version'):
                load_epoch(path, make_pools())
