"""Recurrent bag aggregator, patient classifier and two-stage training

Stage 1 trains on single-cell sequences so the classifier learns that a
sequence is ALL exactly when its cell is a blast. Stage 2 starts from the
stage-1 weights and trains on fixed-length generated sequences. The frozen
extractor never receives gradients; its weight digest is checked before and
after every run and recorded in the checkpoint.
"""

from __future__ import annotations

from typing import (
    Any,
    Dict,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pack_padded_sequence

from .baggen import (
    TRAINING_POLICY,
    AugmentationPolicy,
    CellPools,
    bag_to_sequences,
    generate_epoch,
    split_pools,
)
from .checkpoint import KIND_AGGREGATOR, Checkpoint, load_checkpoint
from .config import JsonConfig
from .core import (
    CellClass,
    CellCrop,
    CellSequence,
    Diagnosis,
    MetricsReport,
    PatientBag,
)
from .errors import CheckpointError, DimensionMismatch, DivergenceError, Fatal
from .features import (
    PROJECTION_DIM,
    FeatureCache,
    FeatureExtractor,
    ProjectionHead,
    extract_batch,
)
from .metrics import metrics_from_labels
from .rng import spawn_rngs, torch_seed


__all__ = (
    'AggregatorClassifier',
    'GroundTruthClassifier',
    'PatientPrediction',
    'Stage1CellClassifier',
    'TrainConfig',
    'TrainResult',
    'encode_sequences',
    'forward',
    'load_model',
    'model_from_checkpoint',
    'predict_patient',
    'sequence_probabilities',
    'train_stage1',
    'train_stage2',
)

logger = logging.getLogger(__name__)

HIDDEN_DIM = 256
PATIENT_DIM = 64

MASK_MODES = ('zeros', 'skip')
AGGREGATIONS = ('max', 'mean')

DECISION_THRESHOLD = 0.5

Encoder = Union[FeatureExtractor, FeatureCache]


class AggregatorClassifier(nn.Module):
    """Projection head, LSTM(256), 64-d patient vector and a 2-logit classifier"""

    def __init__(
        self,
        in_dim: int,
        activation: str = 'relu',
        mask_mode: str = 'zeros',
        sequence_length: int = 15,
    ):
        super().__init__()
        if mask_mode not in MASK_MODES:
            raise Fatal(f'unknown mask mode {mask_mode!r}')

        self.in_dim = in_dim
        self.mask_mode = mask_mode
        self.sequence_length = sequence_length

        self.projection = ProjectionHead(in_dim, activation)
        self.lstm = nn.LSTM(PROJECTION_DIM, HIDDEN_DIM, batch_first=True)
        self.patient_head = nn.Linear(HIDDEN_DIM, PATIENT_DIM)
        self.classifier = nn.Linear(PATIENT_DIM, 2)

    @property
    def activation(self) -> str:
        return self.projection.activation

    def forward(
        self, features: torch.Tensor, pad_mask: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """(B, L, d_g) features and (B, L) pad mask -> patient vectors, logits"""
        if features.shape[-1] != self.in_dim:
            raise DimensionMismatch(
                f'aggregator expects {self.in_dim}-d features, got {features.shape[-1]}'
            )

        # Blank entries feed exact zeros into the recurrence
        inputs = self.projection(features).masked_fill(pad_mask.unsqueeze(-1), 0.0)

        if self.mask_mode == 'skip':
            hidden = self._skip_blanks(inputs, pad_mask)
        else:
            outputs, (h_n, _) = self.lstm(inputs)
            _check_finite(outputs)
            hidden = h_n[-1]

        patient = self.patient_head(hidden)
        return patient, self.classifier(patient)

    def _skip_blanks(
        self, inputs: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        order = torch.argsort(pad_mask.to(torch.int64), dim=1, stable=True)
        compact = torch.gather(inputs, 1, order.unsqueeze(-1).expand_as(inputs))
        # An all-blank sequence runs a single zero step
        lengths = (~pad_mask).sum(dim=1).clamp(min=1)
        packed = pack_padded_sequence(
            compact, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, (h_n, _) = self.lstm(packed)
        hidden: torch.Tensor = h_n[-1]
        return hidden


def _check_finite(outputs: torch.Tensor) -> None:
    finite = torch.isfinite(outputs).reshape(outputs.shape[0], outputs.shape[1], -1)
    bad_steps = (~finite.all(dim=2)).any(dim=0).nonzero()
    if len(bad_steps):
        raise Fatal(
            f'non-finite recurrent activation at sequence step {int(bad_steps[0])}'
        )


def _extractor(encoder: Encoder) -> FeatureExtractor:
    return encoder.extractor if isinstance(encoder, FeatureCache) else encoder


def _features(encoder: Encoder, crops: Sequence[CellCrop]) -> np.ndarray:
    if isinstance(encoder, FeatureCache):
        return encoder.features(crops)
    return extract_batch(encoder, crops)


def encode_sequences(
    sequences: Sequence[CellSequence], encoder: Encoder
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Frozen features for equal-length sequences; blank slots stay zero"""
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise ValueError(f'cannot batch sequences of lengths {sorted(lengths)}')

    extractor = _extractor(encoder)
    mask = np.array([s.pad_mask for s in sequences], dtype=bool)
    features = np.zeros(mask.shape + (extractor.dim,), dtype=np.float32)

    crops = [e for s in sequences for e in s.entries if not e.is_blank]
    if crops:
        features[~mask] = _features(encoder, crops)

    return torch.from_numpy(features), torch.from_numpy(mask)


def forward(
    model: AggregatorClassifier, seq: CellSequence, extractor: Encoder
) -> Tuple[np.ndarray, np.ndarray]:
    """Patient vector (64,) and class probabilities (2,) for one sequence"""
    if _extractor(extractor).dim != model.in_dim:
        raise DimensionMismatch(
            f'{_extractor(extractor).name} yields {_extractor(extractor).dim}-d '
            f'features, the model expects {model.in_dim}'
        )

    model.eval()
    with torch.no_grad():
        features, mask = encode_sequences([seq], extractor)
        patient, logits = model(features, mask)
        probs = F.softmax(logits, dim=-1)
    return patient[0].numpy(), probs[0].numpy()


def sequence_probabilities(
    model: AggregatorClassifier,
    sequences: Sequence[CellSequence],
    encoder: Encoder,
    batch_size: int = 64,
) -> np.ndarray:
    """ALL probability per sequence, in input order"""
    out = np.zeros(len(sequences), dtype=np.float64)
    by_length: Dict[int, List[int]] = {}
    for index, seq in enumerate(sequences):
        by_length.setdefault(len(seq), []).append(index)

    model.eval()
    with torch.no_grad():
        for indices in by_length.values():
            for start in range(0, len(indices), batch_size):
                chunk = indices[start : start + batch_size]
                features, mask = encode_sequences(
                    [sequences[i] for i in chunk], encoder
                )
                _, logits = model(features, mask)
                probs = F.softmax(logits.double(), dim=-1)[:, Diagnosis.ALL.index]
                out[chunk] = probs.numpy()
    return out


def _predict_labels(probs: np.ndarray) -> List[Diagnosis]:
    return [
        Diagnosis.ALL if p > DECISION_THRESHOLD else Diagnosis.HEALTHY for p in probs
    ]


def evaluate_sequences(
    model: AggregatorClassifier, sequences: Sequence[CellSequence], encoder: Encoder
) -> MetricsReport:
    probs = sequence_probabilities(model, sequences, encoder)
    return metrics_from_labels([s.label for s in sequences], _predict_labels(probs))


@dataclass(frozen=True)
class TrainConfig(JsonConfig):
    stage: int = 1
    length: Optional[int] = None
    backbone: str = 'toy_cnn'
    epochs: int = 10
    sequences_per_epoch: int = 512
    validation_sequences: int = 256
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    balance: float = 0.5
    n_cells_range: Optional[Tuple[int, int]] = None
    augment: bool = True
    holdout_fraction: float = 0.2
    validation_fraction: float = 0.2
    patience: int = 3
    early_stop_metric: str = 'macro_f1'
    mask_mode: str = 'zeros'
    projection_activation: str = 'relu'
    from_scratch: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise Fatal(f'training stage must be 1 or 2 (got {self.stage})')
        if self.stage == 1 and self.length not in (None, 1):
            raise Fatal('stage 1 trains on length-1 sequences')
        if self.stage == 1 and self.from_scratch:
            raise Fatal('from_scratch only applies to stage 2')
        if self.sequence_length < 1:
            raise Fatal(f'sequence length must be >= 1 (got {self.sequence_length})')
        if self.epochs < 0 or self.batch_size < 1 or self.sequences_per_epoch < 1:
            raise Fatal('epochs must be >= 0, batch size and epoch size >= 1')
        if self.early_stop_metric not in ('macro_f1', 'accuracy'):
            raise Fatal(f'unknown early-stop metric {self.early_stop_metric!r}')
        if self.mask_mode not in MASK_MODES:
            raise Fatal(f'unknown mask mode {self.mask_mode!r}')
        for name in ('holdout_fraction', 'validation_fraction'):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise Fatal(f'{name} must be in [0, 1) (got {getattr(self, name)})')

    @property
    def sequence_length(self) -> int:
        if self.length is not None:
            return self.length
        return 1 if self.stage == 1 else 15

    @property
    def policy(self) -> AugmentationPolicy:
        return TRAINING_POLICY if self.augment else AugmentationPolicy()


class EpochRecord(NamedTuple):
    epoch: int
    loss: float
    accuracy: Optional[float]
    macro_f1: Optional[float]


class TrainResult(NamedTuple):
    model: AggregatorClassifier
    checkpoint: Checkpoint
    history: List[EpochRecord]
    holdout: Optional[MetricsReport]

    @property
    def holdout_accuracy(self) -> Optional[float]:
        return None if self.holdout is None else self.holdout.accuracy


def _fit(
    model: AggregatorClassifier,
    train_pools: CellPools,
    validation: Sequence[CellSequence],
    cfg: TrainConfig,
    cache: FeatureCache,
    rng: np.random.Generator,
) -> List[EpochRecord]:
    extractor = cache.extractor
    extractor.verify_frozen()

    policy = cfg.policy
    train_encoder: Encoder = cache if policy.is_lossless else extractor
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )

    history: List[EpochRecord] = []
    best_state = copy.deepcopy(model.state_dict())
    best_score: Optional[float] = None
    stale = 0

    for epoch in range(cfg.epochs):
        sequences = generate_epoch(
            train_pools,
            cfg.sequence_length,
            cfg.sequences_per_epoch,
            cfg.balance,
            policy,
            rng,
            cfg.n_cells_range,
        )
        order = rng.permutation(len(sequences))

        model.train()
        total, batches = 0.0, 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [sequences[int(i)] for i in order[start : start + cfg.batch_size]]
            features, mask = encode_sequences(batch, train_encoder)
            targets = torch.tensor([s.label.index for s in batch], dtype=torch.int64)

            _, logits = model(features, mask)
            loss = F.cross_entropy(logits, targets)
            if not torch.isfinite(loss):
                raise DivergenceError('training loss is not finite', epoch, step)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1

        report = evaluate_sequences(model, validation, cache) if validation else None
        record = EpochRecord(
            epoch,
            total / max(1, batches),
            None if report is None else report.accuracy,
            None if report is None else report.macro_f1,
        )
        history.append(record)
        logger.info('epoch', extra={'stage': cfg.stage, **record._asdict()})

        if report is None:
            best_state = copy.deepcopy(model.state_dict())
            continue

        value = getattr(report, cfg.early_stop_metric)
        score = -1.0 if value is None else float(value)
        if best_score is None or score > best_score:
            best_score, stale = score, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info('early stop', extra={'epoch': epoch, 'best': best_score})
                break

    model.load_state_dict(best_state)
    extractor.verify_frozen()
    return history


class TrainingSplit(NamedTuple):
    train: CellPools
    validation: CellPools
    holdout: CellPools


def split_training_pools(
    pools: CellPools, cfg: TrainConfig, rng: np.random.Generator
) -> TrainingSplit:
    """Split pools three ways, per class and without shared crops.

    The validation pool drives early stopping and best-state selection. The
    holdout pool is only scored once training is over.
    """
    holdout_rng, validation_rng = spawn_rngs(rng, 2)
    rest, holdout = split_pools(pools, cfg.holdout_fraction, holdout_rng)
    train, validation = split_pools(rest, cfg.validation_fraction, validation_rng)
    _require_pools(train)
    return TrainingSplit(train, validation, holdout)


def _score(
    model: AggregatorClassifier,
    sequences: Sequence[CellSequence],
    cache: FeatureCache,
) -> Optional[MetricsReport]:
    return evaluate_sequences(model, sequences, cache) if sequences else None


def _single_cell_sequences(pools: CellPools) -> List[CellSequence]:
    return [CellSequence([c], Diagnosis.ALL, 1) for c in pools.blast_pool] + [
        CellSequence([c], Diagnosis.HEALTHY, 0) for c in pools.normal_pool
    ]


def _checkpoint(
    model: AggregatorClassifier,
    stage: int,
    cfg: TrainConfig,
    extractor: FeatureExtractor,
    history: Sequence[EpochRecord],
    holdout: Optional[MetricsReport],
) -> Checkpoint:
    return Checkpoint(
        kind=KIND_AGGREGATOR,
        stage=stage,
        state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
        config_digest=cfg.digest(),
        extractor_digest=extractor.digest(),
        metadata={
            'backbone': extractor.name,
            'in_dim': model.in_dim,
            'projection_activation': model.activation,
            'mask_mode': model.mask_mode,
            'sequence_length': model.sequence_length,
            'train_config': cfg.to_json(),
            'history': [r._asdict() for r in history],
            'holdout_accuracy': None if holdout is None else holdout.accuracy,
        },
    )


def _require_pools(pools: CellPools) -> None:
    if not pools.blast_pool or not pools.normal_pool:
        raise Fatal(
            f'training needs both cell classes (blast={len(pools.blast_pool)}, '
            f'normal={len(pools.normal_pool)})'
        )


def train_stage1(
    pools: CellPools,
    cfg: TrainConfig,
    extractor: FeatureExtractor,
    rng: np.random.Generator,
) -> TrainResult:
    if cfg.stage != 1:
        raise Fatal('train_stage1 needs a stage-1 config')
    _require_pools(pools)

    split_rng, init_rng, train_rng = spawn_rngs(rng, 3)
    split = split_training_pools(pools, cfg, split_rng)

    torch_seed(init_rng)
    model = AggregatorClassifier(
        extractor.dim, cfg.projection_activation, cfg.mask_mode, sequence_length=1
    )

    cache = FeatureCache(extractor)
    validation = _single_cell_sequences(split.validation)
    history = _fit(model, split.train, validation, cfg, cache, train_rng)
    holdout_cells = _single_cell_sequences(split.holdout)
    holdout = _score(model, holdout_cells, cache)

    logger.info(
        'stage 1 complete',
        extra={
            'epochs': len(history),
            'single_cell_accuracy': None if holdout is None else holdout.accuracy,
            'holdout_cells': len(holdout_cells),
        },
    )
    checkpoint = _checkpoint(model, 1, cfg, extractor, history, holdout)
    return TrainResult(model, checkpoint, history, holdout)


def train_stage2(
    pools: CellPools,
    cfg: TrainConfig,
    init: Optional[Checkpoint],
    extractor: FeatureExtractor,
    rng: np.random.Generator,
) -> TrainResult:
    if cfg.stage != 2:
        raise Fatal('train_stage2 needs a stage-2 config')
    _require_pools(pools)

    split_rng, init_rng, val_rng, holdout_rng, train_rng = spawn_rngs(rng, 5)

    if init is not None:
        if init.kind != KIND_AGGREGATOR or init.stage != 1:
            raise CheckpointError(
                f'stage 2 starts from a stage-1 aggregator checkpoint, '
                f'got {init.kind} stage {init.stage}'
            )
        if init.extractor_digest != extractor.digest():
            raise CheckpointError(
                'stage-1 checkpoint was trained against a different extractor',
                extended=f'checkpoint: {init.extractor_digest}\n'
                f'extractor:  {extractor.digest()}',
            )
        model = model_from_checkpoint(init, mask_mode=cfg.mask_mode)
    elif cfg.from_scratch:
        torch_seed(init_rng)
        model = AggregatorClassifier(
            extractor.dim, cfg.projection_activation, cfg.mask_mode
        )
    else:
        raise Fatal('stage 2 needs a stage-1 checkpoint (or from_scratch)')

    model.sequence_length = cfg.sequence_length

    split = split_training_pools(pools, cfg, split_rng)
    validation = _fixed_epoch(split.validation, cfg, val_rng)
    cache = FeatureCache(extractor)
    history = _fit(model, split.train, validation, cfg, cache, train_rng)
    holdout = _score(model, _fixed_epoch(split.holdout, cfg, holdout_rng), cache)

    logger.info(
        'stage 2 complete',
        extra={
            'epochs': len(history),
            'length': cfg.sequence_length,
            'from_scratch': init is None,
            'sequence_accuracy': None if holdout is None else holdout.accuracy,
        },
    )
    checkpoint = _checkpoint(model, 2, cfg, extractor, history, holdout)
    return TrainResult(model, checkpoint, history, holdout)


def _fixed_epoch(
    pools: CellPools, cfg: TrainConfig, rng: np.random.Generator
) -> List[CellSequence]:
    if not pools.blast_pool or not pools.normal_pool:
        return []
    return generate_epoch(
        pools,
        cfg.sequence_length,
        cfg.validation_sequences,
        cfg.balance,
        None,
        rng,
        _validation_range(cfg, pools),
    )


def _validation_range(cfg: TrainConfig, pools: CellPools) -> Tuple[int, int]:
    lo, hi = cfg.n_cells_range or (
        max(1, cfg.sequence_length // 3),
        cfg.sequence_length,
    )
    # sampling within a sequence is without replacement
    hi = min(hi, len(pools.normal_pool), len(pools.blast_pool))
    return min(lo, hi), hi


def model_from_checkpoint(
    checkpoint: Checkpoint, mask_mode: Optional[str] = None
) -> AggregatorClassifier:
    if checkpoint.kind != KIND_AGGREGATOR:
        raise CheckpointError(
            f'expected an aggregator checkpoint, got {checkpoint.kind}'
        )
    meta = checkpoint.metadata
    model = AggregatorClassifier(
        int(meta['in_dim']),
        meta['projection_activation'],
        mask_mode or meta['mask_mode'],
        sequence_length=int(meta['sequence_length']),
    )
    model.load_state_dict(checkpoint.state_dict)
    return model.eval()


def load_model(
    path: Any, extractor: FeatureExtractor
) -> Tuple[AggregatorClassifier, Checkpoint]:
    checkpoint = load_checkpoint(
        path, expected_kind=KIND_AGGREGATOR, extractor_digest=extractor.digest()
    )
    if int(checkpoint.metadata['in_dim']) != extractor.dim:
        raise DimensionMismatch(
            f'{path} expects {checkpoint.metadata["in_dim"]}-d features, '
            f'{extractor.name} yields {extractor.dim}'
        )
    return model_from_checkpoint(checkpoint), checkpoint


class PatientPrediction(NamedTuple):
    patient_id: str
    label: Diagnosis
    probability: float
    per_sequence: Tuple[float, ...]
    empty: bool = False

    def to_json(self) -> Dict[str, Any]:
        return {
            'patient_id': self.patient_id,
            'label': self.label.value,
            'probability': self.probability,
            'per_sequence': list(self.per_sequence),
            'empty': self.empty,
        }


def predict_patient(
    model: AggregatorClassifier,
    bag: PatientBag,
    extractor: Encoder,
    packing: str = 'chunk',
    aggregation: str = 'max',
    length: Optional[int] = None,
) -> PatientPrediction:
    if bag.is_empty:
        raise Fatal(f'patient {bag.patient_id}: cannot predict on an empty bag')
    if aggregation not in AGGREGATIONS:
        raise Fatal(f'unknown aggregation rule {aggregation!r}')

    sequences = bag_to_sequences(bag, length or model.sequence_length, packing)
    probs = sequence_probabilities(model, sequences, extractor)
    probability = float(probs.max() if aggregation == 'max' else probs.mean())
    label = Diagnosis.ALL if probability > DECISION_THRESHOLD else Diagnosis.HEALTHY
    return PatientPrediction(
        bag.patient_id, label, probability, tuple(float(p) for p in probs)
    )


class GroundTruthClassifier:
    """Cell classes straight from the annotations (synthetic data only)"""

    def classify(self, crops: Sequence[CellCrop]) -> List[CellClass]:
        classes = []
        for crop in crops:
            if crop.cell_class is None:
                raise Fatal(f'{crop.crop_id}: no ground-truth cell class')
            classes.append(crop.cell_class)
        return classes


class Stage1CellClassifier:
    """Labels each crop with a stage-1 model's length-1 decision"""

    def __init__(self, model: AggregatorClassifier, extractor: Encoder):
        self.model = model
        self.extractor = extractor

    def classify(self, crops: Sequence[CellCrop]) -> List[CellClass]:
        if not crops:
            return []
        # unknown blast count: the label is a placeholder
        sequences = [CellSequence([c], Diagnosis.HEALTHY, -1) for c in crops]
        probs = sequence_probabilities(self.model, sequences, self.extractor)
        return [
            CellClass.BLAST if p > DECISION_THRESHOLD else CellClass.NORMAL
            for p in probs
        ]
