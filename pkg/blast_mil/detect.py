"""White-cell detection: training, inference, NMS and mAP evaluation

Detectors implement a small interface (`DetectorModel.propose`) and are
registered by name. Two implementations exist: a torchvision Faster R-CNN
(ResNet50-FPN or a small "toy" backbone for desk-scale runs) and an oracle that
replays ground-truth boxes, which isolates downstream stages from detector
error.
"""

from __future__ import annotations

from typing import (
    Any,
    Callable,
    ClassVar,
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Type,
)

import math
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torchvision.models.detection import FasterRCNN, fasterrcnn_resnet50_fpn
from torchvision.models.detection.faster_rcnn import FastRCNNPredictor
from torchvision.models.detection.rpn import AnchorGenerator
from torchvision.ops import MultiScaleRoIAlign
from torchvision.ops import nms as _torch_nms

from .checkpoint import KIND_DETECTOR, Checkpoint, load_checkpoint
from .config import JsonConfig, use_weights_cache
from .core import (
    CROP_SIZE,
    AnnotatedImage,
    BoundingBox,
    CellClass,
    CellCrop,
    DatasetManifest,
)
from .crops import crop_boxes
from .errors import DivergenceError, Fatal
from .mean_ap import MapResult, evaluate_map
from .rng import torch_seed


__all__ = (
    'CLASS_MAPS',
    'DetectionResult',
    'DetectorCellClassifier',
    'DetectorModel',
    'DetectorTrainConfig',
    'FasterRCNNDetector',
    'OracleDetector',
    'crop_cells',
    'detect_cells',
    'detection_from_json',
    'detection_to_json',
    'detector_checkpoint',
    'detector_from_checkpoint',
    'evaluate_detector',
    'load_detector',
    'nms',
    'oracle_detector',
    'train_detector',
)

logger = logging.getLogger(__name__)

MIN_INPUT_SIZE = 32

CLASS_MAPS: Dict[str, Tuple[str, ...]] = {
    'cell': ('cell',),
    'blast-normal': (CellClass.BLAST.value, CellClass.NORMAL.value),
}

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class DetectionResult:
    def __init__(self, image_id: str, boxes: Sequence[BoundingBox]):
        self.image_id = image_id
        self.boxes = tuple(boxes)

        for prev, box in zip(self.boxes, self.boxes[1:]):
            if box.score > prev.score:
                raise ValueError(f'{image_id}: detections not sorted by score')

    def __len__(self) -> int:
        return len(self.boxes)

    def __repr__(self) -> str:
        return f'<DetectionResult {self.image_id} boxes={len(self.boxes)}>'


def detection_to_json(result: DetectionResult) -> Dict[str, Any]:
    return {
        'image': result.image_id,
        'boxes': [b.to_json(with_score=True) for b in result.boxes],
    }


def detection_from_json(data: Mapping[str, Any]) -> DetectionResult:
    return DetectionResult(
        data['image'], [BoundingBox.from_json(b) for b in data['boxes']]
    )


class DetectorModel(ABC):
    name: ClassVar[str]

    def __init__(self, class_map: Sequence[str]):
        self._class_map = tuple(class_map)

    @property
    def class_map(self) -> Tuple[str, ...]:
        return self._class_map

    @property
    def two_class(self) -> bool:
        return self._class_map == CLASS_MAPS['blast-normal']

    @abstractmethod
    def propose(self, image: AnnotatedImage) -> List[BoundingBox]:
        """Raw scored boxes for an image, before thresholding and NMS"""

    def describe(self) -> Dict[str, Any]:
        return {'detector': self.name, 'class_map': list(self._class_map)}


DETECTORS: Dict[str, Type[DetectorModel]] = {}


def _register(
    name: str,
) -> Callable[[Type[DetectorModel]], Type[DetectorModel]]:
    def inner(cls: Type[DetectorModel]) -> Type[DetectorModel]:
        cls.name = name
        DETECTORS[name] = cls
        return cls

    return inner


@_register('oracle')
class OracleDetector(DetectorModel):
    """Replays ground-truth boxes with score 1.0"""

    def __init__(
        self,
        ground_truth: Mapping[str, Sequence[BoundingBox]],
        class_map: Sequence[str],
    ):
        super().__init__(class_map)
        self._ground_truth = {k: tuple(v) for k, v in ground_truth.items()}

    def propose(self, image: AnnotatedImage) -> List[BoundingBox]:
        boxes = self._ground_truth.get(image.image_id, image.boxes)
        return [b.with_score(1.0) for b in boxes]


def oracle_detector(manifest: DatasetManifest) -> OracleDetector:
    ground_truth = {r.image_id: r.boxes for r in manifest.records}
    labelled = [b for boxes in ground_truth.values() for b in boxes]
    if labelled and all(b.cell_class is not None for b in labelled):
        class_map = CLASS_MAPS['blast-normal']
    else:
        class_map = CLASS_MAPS['cell']
    return OracleDetector(ground_truth, class_map)


@dataclass(frozen=True)
class DetectorTrainConfig(JsonConfig):
    backbone: str = 'toy'
    classes: str = 'cell'
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-4
    image_size: int = 256
    pretrained: bool = False
    flip_augment: bool = True
    map_floor: float = 0.5

    def __post_init__(self) -> None:
        if self.backbone not in _BACKBONES:
            raise Fatal(
                f'unknown detector backbone {self.backbone!r} '
                f'(choose from {", ".join(sorted(_BACKBONES))})'
            )
        if self.classes not in CLASS_MAPS:
            raise Fatal(f'unknown detector class map {self.classes!r}')
        if self.epochs < 0 or self.batch_size < 1:
            raise Fatal('detector epochs must be >= 0 and batch size >= 1')


def _toy_network(num_classes: int, image_size: int, _pretrained: bool) -> FasterRCNN:
    body = nn.Sequential(
        nn.Conv2d(3, 32, 3, stride=2, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(32, 64, 3, stride=2, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(64, 96, 3, stride=2, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(96, 128, 3, padding=1),
        nn.ReLU(inplace=True),
    )
    setattr(body, 'out_channels', 128)

    anchors = AnchorGenerator(
        sizes=((24, 32, 48, 64),), aspect_ratios=((0.75, 1.0, 1.33),)
    )
    pooler = MultiScaleRoIAlign(featmap_names=['0'], output_size=7, sampling_ratio=2)
    return FasterRCNN(
        body,
        num_classes=num_classes,
        rpn_anchor_generator=anchors,
        box_roi_pool=pooler,
        min_size=image_size,
        max_size=image_size,
        image_mean=list(_IMAGENET_MEAN),
        image_std=list(_IMAGENET_STD),
        rpn_pre_nms_top_n_train=600,
        rpn_post_nms_top_n_train=300,
        rpn_pre_nms_top_n_test=300,
        rpn_post_nms_top_n_test=100,
        box_batch_size_per_image=128,
        box_score_thresh=0.01,
    )


def _resnet50_network(
    num_classes: int, image_size: int, pretrained: bool
) -> FasterRCNN:
    if not pretrained:
        return fasterrcnn_resnet50_fpn(
            weights=None,
            weights_backbone=None,
            num_classes=num_classes,
            min_size=image_size,
            max_size=image_size,
        )

    # pylint: disable=import-outside-toplevel
    from torchvision.models.detection import FasterRCNN_ResNet50_FPN_Weights

    use_weights_cache()
    network = fasterrcnn_resnet50_fpn(
        weights=FasterRCNN_ResNet50_FPN_Weights.DEFAULT,
        min_size=image_size,
        max_size=image_size,
    )
    in_features = network.roi_heads.box_predictor.cls_score.in_features
    network.roi_heads.box_predictor = FastRCNNPredictor(in_features, num_classes)
    return network


_BACKBONES: Dict[str, Callable[[int, int, bool], FasterRCNN]] = {
    'toy': _toy_network,
    'resnet50': _resnet50_network,
}


def build_network(
    backbone: str, class_map: Sequence[str], image_size: int, pretrained: bool
) -> Tuple[FasterRCNN, bool]:
    """Build the torchvision detector; returns it and whether weights were pretrained"""
    num_classes = len(class_map) + 1
    factory = _BACKBONES[backbone]
    if pretrained:
        try:
            return factory(num_classes, image_size, True), True
        except Exception as exc:  # pylint: disable=broad-except
            logger.warning(
                'pretrained detector weights unavailable, using random init',
                extra={'backbone': backbone, 'reason': str(exc)},
            )
    return factory(num_classes, image_size, False), False


def _image_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(pixels, dtype=np.float32) / 255.0).permute(2, 0, 1)


@_register('faster_rcnn')
class FasterRCNNDetector(DetectorModel):
    def __init__(
        self,
        network: FasterRCNN,
        class_map: Sequence[str],
        backbone: str,
        image_size: int,
        pretrained: bool = False,
        train_map: Optional[float] = None,
    ):
        super().__init__(class_map)
        self.network = network.eval()
        self.backbone = backbone
        self.image_size = image_size
        self.pretrained = pretrained
        self.train_map = train_map

    def _label_class(self, label: int) -> Optional[CellClass]:
        if not self.two_class:
            return None
        return CellClass(self.class_map[label - 1])

    def propose(self, image: AnnotatedImage) -> List[BoundingBox]:
        self.network.eval()
        with torch.no_grad():
            output = self.network([_image_tensor(image.pixels)])[0]

        boxes: List[BoundingBox] = []
        for coords, score, label in zip(
            output['boxes'].tolist(),
            output['scores'].tolist(),
            output['labels'].tolist(),
        ):
            x0 = min(max(coords[0], 0.0), image.width)
            y0 = min(max(coords[1], 0.0), image.height)
            x1 = min(max(coords[2], 0.0), image.width)
            y1 = min(max(coords[3], 0.0), image.height)
            if x1 <= x0 or y1 <= y0:
                continue
            boxes.append(
                BoundingBox(
                    x0,
                    y0,
                    x1,
                    y1,
                    score=min(max(float(score), 0.0), 1.0),
                    cell_class=self._label_class(int(label)),
                )
            )
        return boxes

    def describe(self) -> Dict[str, Any]:
        out = super().describe()
        out.update(
            backbone=self.backbone,
            image_size=self.image_size,
            pretrained=self.pretrained,
            train_map=self.train_map,
        )
        return out


def nms(boxes: Sequence[BoundingBox], iou_threshold: float) -> List[BoundingBox]:
    """Class-agnostic greedy non-maximum suppression, output sorted by score"""
    if not boxes:
        return []

    coords = torch.tensor([b.coords() for b in boxes], dtype=torch.float64)
    scores = torch.tensor([b.score for b in boxes], dtype=torch.float64)
    keep = _torch_nms(coords, scores, iou_threshold).tolist()
    keep.sort(key=lambda i: (-boxes[i].score, i))
    return [boxes[i] for i in keep]


def detect_cells(
    model: DetectorModel,
    image: AnnotatedImage,
    score_threshold: float = 0.5,
    nms_iou: float = 0.5,
) -> DetectionResult:
    for name, value in (('score threshold', score_threshold), ('NMS IoU', nms_iou)):
        if not 0.0 <= value <= 1.0:
            raise Fatal(f'{name} {value} outside [0, 1]')

    if image.width < MIN_INPUT_SIZE or image.height < MIN_INPUT_SIZE:
        raise Fatal(
            f'{image.image_id}: {image.width}x{image.height} image is below the '
            f'minimum detector input of {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}'
        )

    proposed = [b for b in model.propose(image) if b.score > score_threshold]
    return DetectionResult(image.image_id, nms(proposed, nms_iou))


def crop_cells(
    image: AnnotatedImage, result: DetectionResult, size: int = CROP_SIZE
) -> List[CellCrop]:
    return crop_boxes(image, result.boxes, size)


def evaluate_detector(
    model: DetectorModel,
    manifest: DatasetManifest,
    split: str = 'test',
    iou_threshold: float = 0.5,
    nms_iou: float = 0.5,
) -> MapResult:
    detections: Dict[str, List[BoundingBox]] = {}
    ground_truth: Dict[str, Tuple[BoundingBox, ...]] = {}
    for image in manifest.iter_images(split):
        ground_truth[image.image_id] = image.boxes
        result = detect_cells(model, image, score_threshold=0.0, nms_iou=nms_iou)
        detections[image.image_id] = list(result.boxes)

    result_map = evaluate_map(detections, ground_truth, model.class_map, iou_threshold)
    logger.info(
        'detector mAP',
        extra={
            'split': split,
            'mAP': result_map.mean_ap,
            'per_class': result_map.per_class,
        },
    )
    return result_map


def _target(image: AnnotatedImage, class_map: Sequence[str]) -> Dict[str, torch.Tensor]:
    if class_map == CLASS_MAPS['cell']:
        labels = [1] * len(image.boxes)
    else:
        labels = []
        for box in image.boxes:
            if box.cell_class is None:
                raise Fatal(
                    f'{image.image_id}: two-class detector training '
                    'needs labelled boxes'
                )
            labels.append(class_map.index(box.cell_class.value) + 1)

    return {
        'boxes': torch.tensor([b.coords() for b in image.boxes], dtype=torch.float32),
        'labels': torch.tensor(labels, dtype=torch.int64),
    }


def _flip(
    tensor: torch.Tensor, target: Dict[str, torch.Tensor], axis: str
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    boxes = target['boxes'].clone()
    if axis == 'x':
        width = tensor.shape[2]
        tensor = tensor.flip(2)
        boxes[:, [0, 2]] = width - target['boxes'][:, [2, 0]]
    else:
        height = tensor.shape[1]
        tensor = tensor.flip(1)
        boxes[:, [1, 3]] = height - target['boxes'][:, [3, 1]]
    return tensor, {'boxes': boxes, 'labels': target['labels']}


def train_detector(
    manifest: DatasetManifest,
    config: DetectorTrainConfig,
    rng: np.random.Generator,
    split: str = 'train',
) -> FasterRCNNDetector:
    class_map = CLASS_MAPS[config.classes]

    samples: List[Tuple[torch.Tensor, Dict[str, torch.Tensor]]] = []
    skipped = 0
    for image in manifest.iter_images(split):
        if not image.boxes:
            skipped += 1
            continue
        samples.append((_image_tensor(image.pixels), _target(image, class_map)))

    if skipped:
        logger.warning(
            'skipped images without boxes', extra={'split': split, 'skipped': skipped}
        )
    if not samples:
        raise Fatal(
            f'no annotated images in the {split!r} split to train a detector on'
        )

    torch_seed(rng)
    network, pretrained = build_network(
        config.backbone, class_map, config.image_size, config.pretrained
    )
    optimizer = torch.optim.Adam(
        [p for p in network.parameters() if p.requires_grad],
        lr=config.lr,
        weight_decay=config.weight_decay,
    )

    network.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            images, targets = [], []
            for index in order[start : start + config.batch_size]:
                tensor, target = samples[int(index)]
                if config.flip_augment:
                    if rng.random() < 0.5:
                        tensor, target = _flip(tensor, target, 'x')
                    if rng.random() < 0.5:
                        tensor, target = _flip(tensor, target, 'y')
                images.append(tensor)
                targets.append(target)

            losses = network(images, targets)
            loss = sum(losses.values())
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError('detector loss is not finite', epoch, step)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += value

        logger.info(
            'detector epoch',
            extra={'epoch': epoch, 'loss': total, 'images': len(samples)},
        )

    detector = FasterRCNNDetector(
        network.eval(), class_map, config.backbone, config.image_size, pretrained
    )

    train_map = evaluate_detector(detector, manifest, split).mean_ap
    detector.train_map = train_map
    if train_map < config.map_floor:
        logger.warning(
            'detector did not reach the mAP floor on its training split',
            extra={'mAP': train_map, 'floor': config.map_floor},
        )
    return detector


def detector_checkpoint(detector: FasterRCNNDetector, config_digest: str) -> Checkpoint:
    return Checkpoint(
        kind=KIND_DETECTOR,
        stage=0,
        state_dict=dict(detector.network.state_dict()),
        config_digest=config_digest,
        extractor_digest=None,
        metadata={
            'backbone': detector.backbone,
            'class_map': list(detector.class_map),
            'image_size': detector.image_size,
            'pretrained': detector.pretrained,
            'train_map': detector.train_map,
        },
    )


def detector_from_checkpoint(checkpoint: Checkpoint) -> FasterRCNNDetector:
    meta = checkpoint.metadata
    class_map = tuple(meta['class_map'])
    network, _ = build_network(
        meta['backbone'], class_map, int(meta['image_size']), False
    )
    network.load_state_dict(checkpoint.state_dict)
    return FasterRCNNDetector(
        network,
        class_map,
        meta['backbone'],
        int(meta['image_size']),
        bool(meta['pretrained']),
        meta.get('train_map'),
    )


def load_detector(path: Any) -> FasterRCNNDetector:
    return detector_from_checkpoint(load_checkpoint(path, expected_kind=KIND_DETECTOR))


class DetectorCellClassifier:
    """Labels single crops with a two-class detector's top-scoring box"""

    def __init__(self, detector: DetectorModel, score_threshold: float = 0.05):
        if not detector.two_class:
            raise Fatal('detector-sourced cell classes need a blast-normal detector')
        self.detector = detector
        self.score_threshold = score_threshold

    def classify(self, crops: Sequence[CellCrop]) -> List[CellClass]:
        classes = []
        for crop in crops:
            image = AnnotatedImage(crop.crop_id, np.array(crop.pixels))
            boxes = [
                b
                for b in self.detector.propose(image)
                if b.cell_class is not None and b.score > self.score_threshold
            ]
            if boxes:
                best = max(boxes, key=lambda b: b.score)
                classes.append(best.cell_class)
            else:
                classes.append(CellClass.NORMAL)
        return classes  # type: ignore
