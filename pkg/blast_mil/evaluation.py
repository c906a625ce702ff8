"""Patient-level evaluation, partitioning, biomarker attacks and baselines

Attacks remove every cell of one class from a bag and re-run prediction, which
measures how much the classifier relies on that class. Recall over ALL bags is
the quantity of interest: removing blasts should collapse it, removing normal
cells should not hurt it.
"""

from __future__ import annotations

from typing import (
    Any,
    Dict,
    List,
    NamedTuple,
    Optional,
    Protocol,
    Sequence,
    Tuple,
)

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.linear_model import Perceptron

from .baggen import CellPools
from .config import JsonConfig
from .core import (
    CROP_SIZE,
    CellClass,
    CellCrop,
    DatasetManifest,
    Diagnosis,
    MetricsReport,
    PatientBag,
)
from .crops import crop_boxes
from .detect import DetectorCellClassifier, DetectorModel, crop_cells, detect_cells
from .errors import Fatal
from .metrics import metrics_from_labels, utc_now
from .model import (
    AggregatorClassifier,
    Encoder,
    GroundTruthClassifier,
    PatientPrediction,
    predict_patient,
)


__all__ = (
    'AttackMode',
    'AttackSpec',
    'AttackTable',
    'CellClassifier',
    'ClassSource',
    'PartitionSpec',
    'apply_attack',
    'bags_from_manifest',
    'cell_classifier',
    'evaluate_bags',
    'exclude_training_cells',
    'ideal_perceptron_baseline',
    'partition_patients',
    'predict_bag',
    'run_attack_experiment',
)

logger = logging.getLogger(__name__)


class CellClassifier(Protocol):
    def classify(self, crops: Sequence[CellCrop]) -> List[CellClass]:
        ...


class AttackMode(Enum):
    NONE = 'none'
    REMOVE_BLAST = 'remove-blast'
    REMOVE_NORMAL = 'remove-normal'


class ClassSource(Enum):
    GROUND_TRUTH = 'gt'
    DETECTOR = 'detector'


@dataclass(frozen=True)
class AttackSpec(JsonConfig):
    mode: AttackMode = AttackMode.NONE
    source: ClassSource = ClassSource.GROUND_TRUTH


@dataclass(frozen=True)
class PartitionSpec(JsonConfig):
    partition_size: int = 50
    remainder: str = 'discard'
    shuffle: bool = False

    def __post_init__(self) -> None:
        if self.partition_size < 1:
            raise Fatal(f'partition size must be >= 1 (got {self.partition_size})')
        if self.remainder != 'discard':
            raise Fatal(f'unsupported remainder policy {self.remainder!r}')


def cell_classifier(
    source: ClassSource, detector: Optional[DetectorModel] = None
) -> CellClassifier:
    if source is ClassSource.GROUND_TRUTH:
        return GroundTruthClassifier()
    if detector is None:
        raise Fatal(
            'detector-sourced cell classes need a two-class detector checkpoint'
        )
    return DetectorCellClassifier(detector)


def bags_from_manifest(
    manifest: DatasetManifest,
    split: Optional[str] = 'test',
    detector: Optional[DetectorModel] = None,
    size: int = CROP_SIZE,
    score_threshold: float = 0.5,
    nms_iou: float = 0.5,
    allow_unlabelled: bool = False,
) -> List[PatientBag]:
    """One bag per patient, cropped from ground truth or from detections

    With `allow_unlabelled`, patients without a diagnosis get a HEALTHY
    placeholder; prediction never reads it.
    """
    bags = []
    for patient_id, records in manifest.patients(split).items():
        diagnoses = {r.diagnosis for r in records}
        if len(diagnoses) != 1:
            raise Fatal(f'patient {patient_id}: inconsistent diagnoses across images')
        diagnosis = diagnoses.pop()
        if diagnosis is None:
            if not allow_unlabelled:
                raise Fatal(f'patient {patient_id}: no diagnosis recorded')
            diagnosis = Diagnosis.HEALTHY

        cells: List[CellCrop] = []
        for record in records:
            image = manifest.load_image(record)
            if detector is None:
                cells.extend(crop_boxes(image, image.boxes, size))
            else:
                result = detect_cells(detector, image, score_threshold, nms_iou)
                cells.extend(crop_cells(image, result, size))
        bags.append(PatientBag(patient_id, cells, diagnosis))

    logger.info(
        'built patient bags',
        extra={
            'split': split,
            'patients': len(bags),
            'cells': sum(len(b) for b in bags),
            'source': 'ground-truth' if detector is None else detector.name,
        },
    )
    return bags


def partition_patients(
    bags: Sequence[PatientBag], spec: PartitionSpec, rng: np.random.Generator
) -> List[PatientBag]:
    """Split each patient into pseudo-patients of exactly `partition_size` cells"""
    size = spec.partition_size
    out: List[PatientBag] = []
    discarded = 0
    for bag in bags:
        cells = list(bag.cells)
        if spec.shuffle:
            cells = [cells[i] for i in rng.permutation(len(cells))]
        n_parts = len(cells) // size
        discarded += len(cells) - n_parts * size
        out.extend(
            PatientBag(
                f'{bag.patient_id}#{k}',
                cells[k * size : (k + 1) * size],
                bag.diagnosis,
            )
            for k in range(n_parts)
        )

    if not out:
        logger.warning(
            'no bag is large enough to partition', extra={'partition_size': size}
        )
    else:
        logger.info(
            'partitioned patients',
            extra={
                'partition_size': size,
                'pseudo_patients': len(out),
                'discarded_cells': discarded,
            },
        )
    return out


def apply_attack(
    bag: PatientBag, spec: AttackSpec, classifier: Optional[CellClassifier] = None
) -> PatientBag:
    if spec.mode is AttackMode.NONE:
        return bag
    if classifier is None:
        raise Fatal(f'{spec.mode.value} attack needs a cell classifier')

    removed = (
        CellClass.BLAST if spec.mode is AttackMode.REMOVE_BLAST else CellClass.NORMAL
    )
    classes = classifier.classify(bag.cells)
    attacked = bag.with_cells(c for c, k in zip(bag.cells, classes) if k is not removed)

    if attacked.is_empty:
        logger.debug(
            'attack emptied bag',
            extra={'patient': bag.patient_id, 'attack': spec.mode.value},
        )
    return attacked


def predict_bag(
    model: AggregatorClassifier,
    bag: PatientBag,
    extractor: Encoder,
    packing: str,
    aggregation: str,
    length: Optional[int],
) -> PatientPrediction:
    if bag.is_empty:
        # no evidence: defined as HEALTHY and flagged
        return PatientPrediction(bag.patient_id, Diagnosis.HEALTHY, 0.0, (), empty=True)
    return predict_patient(model, bag, extractor, packing, aggregation, length)


def evaluate_bags(
    model: AggregatorClassifier,
    bags: Sequence[PatientBag],
    extractor: Encoder,
    packing: str = 'chunk',
    aggregation: str = 'max',
    length: Optional[int] = None,
    name: str = '',
    seed: Optional[int] = None,
    config_digest: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Tuple[MetricsReport, List[PatientPrediction]]:
    if not bags:
        raise Fatal('no patients to evaluate')

    started = utc_now()
    predictions = [
        predict_bag(model, bag, extractor, packing, aggregation, length) for bag in bags
    ]
    report = metrics_from_labels(
        [b.diagnosis for b in bags],
        [p.label for p in predictions],
        name=name,
        seed=seed,
        config_digest=config_digest,
        started_at=started,
        finished_at=utc_now(),
        extra={
            'patients': len(bags),
            'empty_bags': sum(1 for p in predictions if p.empty),
            'packing': packing,
            'aggregation': aggregation,
            **(extra or {}),
        },
    )
    logger.info(
        'evaluated patients',
        extra={
            'report': name,
            'accuracy': report.accuracy,
            'macro_f1': report.macro_f1,
        },
    )
    return report, predictions


def exclude_training_cells(
    bags: Sequence[PatientBag], pools: CellPools
) -> List[PatientBag]:
    """Drop evaluation cells that also appear in the training pools"""
    out = []
    removed = 0
    for bag in bags:
        kept = [c for c in bag.cells if c.crop_id not in pools.by_id]
        removed += len(bag) - len(kept)
        out.append(bag.with_cells(kept))
    logger.info('excluded training cells', extra={'removed_cells': removed})
    return out


class AttackRow(NamedTuple):
    group_size: Optional[int]
    mode: AttackMode
    recall: Optional[float]
    bags: int
    empty_bags: int

    def to_json(self) -> Dict[str, Any]:
        return {
            'group_size': self.group_size,
            'mode': self.mode.value,
            'recall': self.recall,
            'bags': self.bags,
            'empty_bags': self.empty_bags,
        }


class AttackTable(NamedTuple):
    rows: List[AttackRow]

    def recall(
        self, mode: AttackMode, group_size: Optional[int] = None
    ) -> Optional[float]:
        for row in self.rows:
            if row.mode is mode and row.group_size == group_size:
                return row.recall
        raise KeyError((mode, group_size))

    def series(self) -> List[Tuple[Any, str, Optional[float]]]:
        """(x, series, value) points, x being the group size or 'all'"""
        return [
            ('all' if r.group_size is None else r.group_size, r.mode.value, r.recall)
            for r in self.rows
        ]

    def to_json(self) -> List[Dict[str, Any]]:
        return [r.to_json() for r in self.rows]


def run_attack_experiment(
    model: AggregatorClassifier,
    bags: Sequence[PatientBag],
    extractor: Encoder,
    classifier: CellClassifier,
    rng: np.random.Generator,
    modes: Sequence[AttackMode] = tuple(AttackMode),
    group_sizes: Sequence[Optional[int]] = (None,),
    packing: str = 'chunk',
    aggregation: str = 'max',
) -> AttackTable:
    """Recall over ALL bags per (group size, attack mode)"""
    positives = [b for b in bags if b.diagnosis is Diagnosis.ALL]
    if not positives:
        raise Fatal('attack experiments need ALL patients (recall is over positives)')

    rows = []
    for size in group_sizes:
        grouped = (
            positives
            if size is None
            else partition_patients(positives, PartitionSpec(size), rng)
        )
        for mode in modes:
            spec = AttackSpec(mode)
            predictions = [
                predict_bag(
                    model,
                    apply_attack(b, spec, classifier),
                    extractor,
                    packing,
                    aggregation,
                    None,
                )
                for b in grouped
            ]
            hits = sum(1 for p in predictions if p.label is Diagnosis.ALL)
            row = AttackRow(
                size,
                mode,
                hits / len(grouped) if grouped else None,
                len(grouped),
                sum(1 for p in predictions if p.empty),
            )
            rows.append(row)
            logger.info('attack', extra=row.to_json())
    return AttackTable(rows)


def _count_features(
    bags: Sequence[PatientBag], classifier: CellClassifier
) -> np.ndarray:
    rows = []
    for bag in bags:
        classes = classifier.classify(bag.cells)
        n_blast = sum(1 for k in classes if k is CellClass.BLAST)
        rows.append((len(classes) - n_blast, n_blast))
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def perceptron_predictions(
    bags: Sequence[PatientBag], classifier: CellClassifier, seed: int = 0
) -> List[Diagnosis]:
    """Fit a perceptron on per-patient (n_normal, n_blast) and predict the same set"""
    labels = np.array([b.diagnosis.index for b in bags])
    if len(set(labels.tolist())) < 2:
        raise Fatal('the perceptron baseline needs patients of both classes')

    counts = _count_features(bags, classifier)
    perceptron = Perceptron(max_iter=1000, tol=None, random_state=seed)
    perceptron.fit(counts, labels)
    return [Diagnosis.from_index(int(i)) for i in perceptron.predict(counts)]


def ideal_perceptron_baseline(
    bags: Sequence[PatientBag], classifier: CellClassifier, seed: int = 0
) -> float:
    """Optimistic accuracy: the perceptron is scored on its own training set"""
    predictions = perceptron_predictions(bags, classifier, seed)
    hits = sum(1 for b, p in zip(bags, predictions) if b.diagnosis is p)
    return hits / len(bags)
