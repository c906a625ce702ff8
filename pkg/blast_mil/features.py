"""Frozen global feature extractors and the trainable projection head

Each registered backbone is truncated to its penultimate pooled
representation. Weights are frozen on construction and digested; the digest
travels with every aggregator checkpoint so a model is never paired with a
different extractor than the one it was trained against.
"""

from __future__ import annotations

from typing import (
    Any,
    Callable,
    Dict,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import json
import hashlib
import logging
import threading
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from torchvision import models

from .checkpoint import state_digest
from .config import use_weights_cache
from .core import CellCrop
from .errors import DimensionMismatch, Fatal


__all__ = (
    'BACKBONES',
    'FeatureCache',
    'FeatureExtractor',
    'PROJECTION_DIM',
    'ProjectionHead',
    'build_extractor',
    'extract_batch',
    'extract_global',
    'load_feature_dump',
    'project',
    'save_feature_dump',
)

logger = logging.getLogger(__name__)

PROJECTION_DIM = 256

TOY_SEED = 20_201

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneSpec(NamedTuple):
    name: str
    dim: int
    input_size: int
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]
    build: Callable[[bool], nn.Module]


def _alexnet(pretrained: bool) -> nn.Module:
    net = models.alexnet(weights=models.AlexNet_Weights.DEFAULT if pretrained else None)
    net.classifier = net.classifier[:-1]
    return net


def _vgg16(pretrained: bool) -> nn.Module:
    net = models.vgg16(weights=models.VGG16_Weights.DEFAULT if pretrained else None)
    net.classifier = net.classifier[:-1]
    return net


def _resnet50(pretrained: bool) -> nn.Module:
    net = models.resnet50(
        weights=models.ResNet50_Weights.DEFAULT if pretrained else None
    )
    net.fc = nn.Identity()
    return net


def _inception_v3(pretrained: bool) -> nn.Module:
    if pretrained:
        net = models.inception_v3(weights=models.Inception_V3_Weights.DEFAULT)
    else:
        net = models.inception_v3(weights=None, aux_logits=False, init_weights=True)
    net.aux_logits = False
    net.AuxLogits = None
    net.fc = nn.Identity()
    return net


def _vit_b16(pretrained: bool) -> nn.Module:
    net = models.vit_b_16(
        weights=models.ViT_B_16_Weights.DEFAULT if pretrained else None
    )
    net.heads = nn.Identity()
    return net


def _toy_cnn(_pretrained: bool) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(TOY_SEED)
        return nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 192, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )


BACKBONES: Dict[str, BackboneSpec] = {
    spec.name: spec
    for spec in (
        BackboneSpec('alexnet', 4096, 224, _IMAGENET_MEAN, _IMAGENET_STD, _alexnet),
        BackboneSpec(
            'inception_v3', 2048, 299, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5), _inception_v3
        ),
        BackboneSpec('resnet50', 2048, 224, _IMAGENET_MEAN, _IMAGENET_STD, _resnet50),
        BackboneSpec('vgg16', 4096, 224, _IMAGENET_MEAN, _IMAGENET_STD, _vgg16),
        BackboneSpec('vit_b16', 768, 224, _IMAGENET_MEAN, _IMAGENET_STD, _vit_b16),
        BackboneSpec('toy_cnn', 192, 64, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25), _toy_cnn),
    )
}


class FeatureExtractor:
    def __init__(self, spec: BackboneSpec, network: nn.Module, pretrained: bool):
        self.spec = spec
        self.network = network.eval()
        self.pretrained = pretrained
        for param in self.network.parameters():
            param.requires_grad_(False)

        self._digest = state_digest(self.network.state_dict())
        self._mean = torch.tensor(spec.mean).view(1, 3, 1, 1)
        self._std = torch.tensor(spec.std).view(1, 3, 1, 1)

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def dim(self) -> int:
        return self.spec.dim

    def digest(self) -> str:
        return self._digest

    def verify_frozen(self) -> None:
        current = state_digest(self.network.state_dict())
        if current != self._digest:
            raise Fatal(
                f'{self.name}: frozen extractor weights changed',
                extended=f'expected {self._digest}\nfound    {current}',
            )

    def preprocess(self, crops: Sequence[CellCrop]) -> torch.Tensor:
        pixels = np.stack([np.asarray(c.pixels) for c in crops]).astype(np.float32)
        batch = torch.from_numpy(pixels / 255.0).permute(0, 3, 1, 2)
        size = self.spec.input_size
        if batch.shape[-1] != size:
            batch = F.interpolate(
                batch, size=(size, size), mode='bilinear', align_corners=False
            )
        return (batch - self._mean) / self._std

    def __call__(self, crops: Sequence[CellCrop]) -> torch.Tensor:
        with torch.no_grad():
            return self.network(self.preprocess(crops)).reshape(len(crops), -1)

    def describe(self) -> Dict[str, Any]:
        return {
            'backbone': self.name,
            'dim': self.dim,
            'input_size': self.spec.input_size,
            'pretrained': self.pretrained,
            'digest': self._digest,
        }

    def __repr__(self) -> str:
        return f'<FeatureExtractor {self.name} d={self.dim}>'


def build_extractor(name: str, pretrained: bool = True) -> FeatureExtractor:
    try:
        spec = BACKBONES[name]
    except KeyError:
        raise Fatal(
            f'unknown backbone {name!r} (choose from {", ".join(sorted(BACKBONES))})'
        ) from None

    if name == 'toy_cnn':
        return FeatureExtractor(spec, spec.build(False), False)

    if pretrained:
        use_weights_cache()
        try:
            return FeatureExtractor(spec, spec.build(True), True)
        except Exception as exc:  # pylint: disable=broad-except
            logger.warning(
                'pretrained weights unavailable, using random init',
                extra={'backbone': name, 'reason': str(exc)},
            )
    return FeatureExtractor(spec, spec.build(False), False)


def _check_crops(crops: Sequence[CellCrop]) -> None:
    for crop in crops:
        if crop.is_blank:
            raise Fatal('blank crops have no features; pad entries are zero vectors')


def extract_global(extractor: FeatureExtractor, crop: CellCrop) -> np.ndarray:
    _check_crops([crop])
    vector: np.ndarray = extractor([crop])[0].numpy()
    return vector


def extract_batch(
    extractor: FeatureExtractor, crops: Sequence[CellCrop], batch_size: int = 64
) -> np.ndarray:
    _check_crops(crops)
    if not crops:
        return np.zeros((0, extractor.dim), dtype=np.float32)

    chunks = [
        extractor(crops[start : start + batch_size]).numpy()
        for start in range(0, len(crops), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


class ProjectionHead(nn.Module):
    """Trainable d_g -> 256 adapter"""

    def __init__(self, in_dim: int, activation: str = 'relu'):
        super().__init__()
        if activation not in ('relu', 'none'):
            raise Fatal(f'unknown projection activation {activation!r}')
        self.in_dim = in_dim
        self.activation = activation
        self.linear = nn.Linear(in_dim, PROJECTION_DIM)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        out = self.linear(features)
        if self.activation == 'relu':
            out = F.relu(out)
        return out


def project(
    head: ProjectionHead, vector: Union[np.ndarray, torch.Tensor]
) -> torch.Tensor:
    tensor = torch.as_tensor(vector, dtype=head.linear.weight.dtype)
    if tensor.shape[-1] != head.in_dim:
        raise DimensionMismatch(
            f'projection head expects {head.in_dim}-d features, got {tensor.shape[-1]}'
        )
    if not torch.isfinite(tensor).all():
        raise Fatal('non-finite feature vector passed to the projection head')
    out: torch.Tensor = head(tensor)
    return out


def save_feature_dump(
    prefix: Union[str, Path],
    crops: Sequence[CellCrop],
    extractor: FeatureExtractor,
    config_digest: Optional[str] = None,
) -> np.ndarray:
    prefix = Path(prefix)
    features = extract_batch(extractor, crops)
    np.save(prefix.with_suffix('.npy'), features)

    sidecar = {
        'shape': list(features.shape),
        'backbone': extractor.name,
        'digest': extractor.digest(),
        'crop_ids': [c.crop_id for c in crops],
        'config_digest': config_digest,
    }
    with open(prefix.with_suffix('.json'), 'w') as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
        f.write('\n')

    logger.info(
        'wrote feature dump',
        extra={'prefix': str(prefix), 'rows': len(crops), 'backbone': extractor.name},
    )
    return features


def load_feature_dump(prefix: Union[str, Path]) -> Tuple[np.ndarray, Dict[str, Any]]:
    prefix = Path(prefix)
    try:
        features = np.load(prefix.with_suffix('.npy'))
        with open(prefix.with_suffix('.json')) as f:
            sidecar: Dict[str, Any] = json.load(f)
    except (OSError, ValueError) as exc:
        raise Fatal(f'unable to read feature dump {prefix}: {exc}') from None

    if list(features.shape) != list(sidecar.get('shape', [])):
        raise DimensionMismatch(
            f'feature dump {prefix}: array shape {list(features.shape)} '
            f'differs from sidecar {sidecar.get("shape")}'
        )
    return features, sidecar


class FeatureCache:
    """Memoises frozen features by crop pixel content

    Augmented or re-cropped variants of one crop id are cached separately.
    """

    def __init__(self, extractor: FeatureExtractor):
        self.extractor = extractor
        self._store: Dict[bytes, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._store)

    @staticmethod
    def _key(crop: CellCrop) -> bytes:
        return hashlib.blake2b(crop.pixels.tobytes(), digest_size=16).digest()

    def features(self, crops: Sequence[CellCrop]) -> np.ndarray:
        _check_crops(crops)
        keys = [self._key(c) for c in crops]
        with self._lock:
            missing = {k: c for k, c in zip(keys, crops) if k not in self._store}
        if missing:
            computed = extract_batch(self.extractor, list(missing.values()))
            with self._lock:
                self._store.update(zip(missing.keys(), computed))
        with self._lock:
            rows = [self._store[k] for k in keys]
        if not rows:
            return np.zeros((0, self.extractor.dim), dtype=np.float32)
        return np.stack(rows)
