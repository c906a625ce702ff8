from __future__ import annotations

from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase

import numpy as np
import torch

from .core import CellClass, CellCrop, blank_crop
from .errors import DimensionMismatch, Fatal
from .features import (
    PROJECTION_DIM,
    FeatureCache,
    ProjectionHead,
    build_extractor,
    extract_batch,
    extract_global,
    load_feature_dump,
    project,
    save_feature_dump,
)


def crops(n: int, size: int = 64, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    return [
        CellCrop(
            f'c{i}',
            rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8),
            CellClass.NORMAL,
        )
        for i in range(n)
    ]


class ExtractorTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.extractor = build_extractor('toy_cnn')

    def test_toy_backbone_dimension(self) -> None:
        self.assertEqual(self.extractor.dim, 192)
        self.assertFalse(self.extractor.pretrained)
        self.assertEqual(extract_global(self.extractor, crops(1)[0]).shape, (192,))

    def test_toy_backbone_is_reproducible(self) -> None:
        self.assertEqual(build_extractor('toy_cnn').digest(), self.extractor.digest())

    def test_batches_agree_with_single_crops(self) -> None:
        batch = crops(5)
        features = extract_batch(self.extractor, batch, batch_size=2)
        self.assertEqual(features.shape, (5, 192))
        np.testing.assert_allclose(
            features[3], extract_global(self.extractor, batch[3]), rtol=1e-5, atol=1e-6
        )
        self.assertEqual(extract_batch(self.extractor, []).shape, (0, 192))

    def test_crop_size_is_resampled(self) -> None:
        features = extract_batch(self.extractor, crops(2, size=32))
        self.assertEqual(features.shape, (2, 192))

    def test_blank_crops_have_no_features(self) -> None:
        with self.assertRaisesRegex(Fatal, 'blank'):
            extract_global(self.extractor, blank_crop(64))

    def test_weights_are_frozen(self) -> None:
        extractor = build_extractor('toy_cnn')
        self.assertFalse(any(p.requires_grad for p in extractor.network.parameters()))
        extractor.verify_frozen()
        with torch.no_grad():
            next(extractor.network.parameters()).add_(1.0)
        with self.assertRaisesRegex(Fatal, 'weights changed'):
            extractor.verify_frozen()

    def test_unknown_backbone(self) -> None:
        with self.assertRaisesRegex(Fatal, 'unknown backbone'):
            build_extractor('lenet')

    def test_cache_reuses_features(self) -> None:
        cache = FeatureCache(self.extractor)
        batch = crops(3)
        first = cache.features(batch)
        again = cache.features(batch + [batch[0].with_pixels(batch[0].pixels)])
        self.assertEqual(len(cache), 3)
        np.testing.assert_array_equal(again[:3], first)
        np.testing.assert_array_equal(again[3], first[0])


class ProjectionTest(TestCase):
    def test_shape_and_activation(self) -> None:
        head = ProjectionHead(192)
        out = project(head, np.random.default_rng(0).normal(size=(4, 192)))
        self.assertEqual(tuple(out.shape), (4, PROJECTION_DIM))
        self.assertTrue(bool((out >= 0).all()))

    def test_dimension_mismatch(self) -> None:
        with self.assertRaisesRegex(DimensionMismatch, 'expects 192-d'):
            project(ProjectionHead(192), np.zeros((1, 100)))

    def test_non_finite_input(self) -> None:
        with self.assertRaisesRegex(Fatal, 'non-finite'):
            project(ProjectionHead(4), np.array([[0.0, np.nan, 0.0, 0.0]]))

    def test_unknown_activation(self) -> None:
        with self.assertRaisesRegex(Fatal, 'activation'):
            ProjectionHead(4, 'tanh')


class FeatureDumpTest(TestCase):
    def test_sidecar_describes_the_array(self) -> None:
        extractor = build_extractor('toy_cnn')
        batch = crops(3)
        with TemporaryDirectory(prefix='blast-mil-features') as tmp:
            prefix = Path(tmp) / 'train'
            written = save_feature_dump(prefix, batch, extractor, config_digest='cfg')
            features, sidecar = load_feature_dump(prefix)

            np.testing.assert_array_equal(features, written)
            self.assertEqual(sidecar['shape'], [3, 192])
            self.assertEqual(sidecar['crop_ids'], ['c0', 'c1', 'c2'])
            self.assertEqual(sidecar['digest'], extractor.digest())
            self.assertEqual(sidecar['config_digest'], 'cfg')

            np.save(prefix.with_suffix('.npy'), features[:2])
            with self.assertRaises(DimensionMismatch):
                load_feature_dump(prefix)

    def test_missing_dump(self) -> None:
        with TemporaryDirectory() as tmp:
            with self.assertRaisesRegex(Fatal, 'unable to read'):
                load_feature_dump(Path(tmp) / 'nothing')
