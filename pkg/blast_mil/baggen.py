"""Synthetic fixed-length training sequences built from labelled cell pools

A sequence labelled ALL holds at least one blast; a HEALTHY sequence holds
none. Each sequence draws a random number of cells, pads the remainder with
blank crops and shuffles the result, so neither the number nor the position of
cells carries label information.
"""

from __future__ import annotations

from typing import (
    Any,
    Dict,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import json
import math
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import JsonConfig
from .core import (
    CROP_SIZE,
    CellClass,
    CellCrop,
    CellSequence,
    DatasetManifest,
    Diagnosis,
    PatientBag,
    blank_crop,
)
from .crops import crop_boxes
from .errors import Fatal, InfeasibleConfig, PoolExhausted
from .rng import spawn_rngs


__all__ = (
    'AugmentationPolicy',
    'CellPools',
    'TRAINING_POLICY',
    'augment',
    'bag_to_sequences',
    'default_cell_range',
    'generate_epoch',
    'generate_sequence',
    'load_epoch',
    'pools_from_manifest',
    'save_epoch',
    'split_pools',
)

logger = logging.getLogger(__name__)

EPOCH_VERSION = 1

PACKING_MODES = ('chunk', 'single')


class CellPools:
    def __init__(self, blast_pool: Iterable[CellCrop], normal_pool: Iterable[CellCrop]):
        self.blast_pool = tuple(blast_pool)
        self.normal_pool = tuple(normal_pool)

        for pool, expected in (
            (self.blast_pool, CellClass.BLAST),
            (self.normal_pool, CellClass.NORMAL),
        ):
            for crop in pool:
                if crop.is_blank or crop.cell_class is not expected:
                    raise ValueError(
                        f'{crop.crop_id}: {expected.value} pool holds a '
                        f'{"blank" if crop.is_blank else crop.cell_class} crop'
                    )

        self.by_id: Dict[str, CellCrop] = {}
        for crop in self.blast_pool + self.normal_pool:
            if crop.crop_id in self.by_id:
                raise ValueError(f'{crop.crop_id}: crop appears twice in the pools')
            self.by_id[crop.crop_id] = crop

        sizes = {c.size for c in self.by_id.values()}
        if len(sizes) > 1:
            raise ValueError(f'pools mix crop sizes {sorted(sizes)}')
        self.crop_size = sizes.pop() if sizes else CROP_SIZE

    @classmethod
    def from_crops(cls, crops: Iterable[CellCrop]) -> CellPools:
        crops = list(crops)
        return cls(
            [c for c in crops if c.cell_class is CellClass.BLAST],
            [c for c in crops if c.cell_class is CellClass.NORMAL],
        )

    def __len__(self) -> int:
        return len(self.by_id)

    def __repr__(self) -> str:
        return (
            f'<CellPools blast={len(self.blast_pool)} normal={len(self.normal_pool)} '
            f'size={self.crop_size}>'
        )


def pools_from_manifest(
    manifest: DatasetManifest, split: str = 'train', size: int = CROP_SIZE
) -> CellPools:
    """Labelled pools cropped from the ground-truth boxes of a split"""
    crops: List[CellCrop] = []
    unlabelled = 0
    for image in manifest.iter_images(split):
        for crop in crop_boxes(image, image.boxes, size):
            if crop.cell_class is None:
                unlabelled += 1
            else:
                crops.append(crop)

    if unlabelled:
        logger.warning(
            'skipped unlabelled boxes while building pools',
            extra={'split': split, 'skipped': unlabelled},
        )

    pools = CellPools.from_crops(crops)
    logger.info(
        'built cell pools',
        extra={
            'split': split,
            'blast': len(pools.blast_pool),
            'normal': len(pools.normal_pool),
        },
    )
    return pools


def split_pools(
    pools: CellPools, holdout_fraction: float, rng: np.random.Generator
) -> Tuple[CellPools, CellPools]:
    if not 0.0 <= holdout_fraction < 1.0:
        raise Fatal(f'holdout fraction {holdout_fraction} outside [0, 1)')

    train: List[CellCrop] = []
    holdout: List[CellCrop] = []
    for pool in (pools.blast_pool, pools.normal_pool):
        order = rng.permutation(len(pool))
        n_hold = int(round(holdout_fraction * len(pool)))
        if pool and n_hold >= len(pool):
            n_hold = len(pool) - 1
        holdout.extend(pool[i] for i in order[:n_hold])
        train.extend(pool[i] for i in order[n_hold:])

    return CellPools.from_crops(train), CellPools.from_crops(holdout)


@dataclass(frozen=True)
class AugmentationPolicy(JsonConfig):
    """Label-preserving rigid transforms only

    `quarter_turns` rotates by a uniform multiple of 90 degrees. Rotation is
    drawn uniformly (degrees) from the given range, translation uniformly from
    [-translation, translation] pixels per axis, and each enabled flip is
    applied with probability 1/2. Pixels moved in from outside the crop repeat
    the crop's own border, so no transform introduces blank regions.
    """

    rotation: Optional[Tuple[float, float]] = None
    translation: int = 0
    hflip: bool = False
    vflip: bool = False
    quarter_turns: bool = False

    def __post_init__(self) -> None:
        if self.rotation is not None and self.rotation[0] > self.rotation[1]:
            raise Fatal(f'rotation range {self.rotation} is empty')
        if self.translation < 0:
            raise Fatal('translation bound must be >= 0')

    @property
    def is_identity(self) -> bool:
        return self.is_lossless and not (self.hflip or self.vflip or self.quarter_turns)

    @property
    def is_lossless(self) -> bool:
        """Only pixel permutations: each crop has at most eight variants"""
        return self.rotation is None and self.translation == 0


# Crops are evaluated unrotated and unshifted; the dihedral group keeps
# training crops on that same pixel grid.
TRAINING_POLICY = AugmentationPolicy(quarter_turns=True, hflip=True, vflip=True)


def augment(
    crop: CellCrop, policy: AugmentationPolicy, rng: np.random.Generator
) -> CellCrop:
    if crop.is_blank:
        raise Fatal('blank crops are not augmented')
    if policy.is_identity:
        return crop

    pixels = np.asarray(crop.pixels, dtype=np.float64)

    if policy.quarter_turns:
        pixels = np.rot90(pixels, k=int(rng.integers(4)), axes=(0, 1))

    if policy.rotation is not None:
        angle = rng.uniform(*policy.rotation)
        pixels = ndimage.rotate(
            pixels,
            angle,
            axes=(1, 0),
            reshape=False,
            order=1,
            mode='reflect',
        )

    if policy.translation:
        dy, dx = rng.integers(-policy.translation, policy.translation + 1, size=2)
        pixels = ndimage.shift(pixels, (int(dy), int(dx), 0), order=0, mode='nearest')

    if policy.hflip and rng.random() < 0.5:
        pixels = pixels[:, ::-1]
    if policy.vflip and rng.random() < 0.5:
        pixels = pixels[::-1, :]

    out = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return crop.with_pixels(np.ascontiguousarray(out))


def default_cell_range(length: int) -> Tuple[int, int]:
    return max(1, length // 3), length


def _draw(
    pool: Sequence[CellCrop], count: int, rng: np.random.Generator, name: str
) -> List[CellCrop]:
    if count > len(pool):
        raise PoolExhausted(
            f'{name} pool has {len(pool)} crops, a sequence needs {count}'
        )
    return [pool[i] for i in rng.choice(len(pool), size=count, replace=False)]


def generate_sequence(
    pools: CellPools,
    length: int,
    label: Diagnosis,
    n_cells_range: Optional[Tuple[int, int]] = None,
    policy: Optional[AugmentationPolicy] = None,
    rng: Optional[np.random.Generator] = None,
) -> CellSequence:
    if rng is None:
        raise ValueError('generate_sequence needs a random stream')
    lo, hi = default_cell_range(length) if n_cells_range is None else n_cells_range
    if not 1 <= lo <= hi <= length:
        raise InfeasibleConfig(
            f'cell count range [{lo}, {hi}] incompatible with sequence length {length}'
        )

    n_cells = int(rng.integers(lo, hi + 1))
    n_blast = int(rng.integers(1, n_cells + 1)) if label is Diagnosis.ALL else 0

    cells = _draw(pools.blast_pool, n_blast, rng, 'blast')
    cells += _draw(pools.normal_pool, n_cells - n_blast, rng, 'normal')

    if policy is not None and not policy.is_identity:
        cells = [augment(c, policy, rng) for c in cells]

    entries = cells + [blank_crop(pools.crop_size)] * (length - n_cells)
    order = rng.permutation(length)
    return CellSequence([entries[i] for i in order], label, n_blast)


def generate_epoch(
    pools: CellPools,
    length: int,
    n_sequences: int,
    balance: float = 0.5,
    policy: Optional[AugmentationPolicy] = None,
    rng: Optional[np.random.Generator] = None,
    n_cells_range: Optional[Tuple[int, int]] = None,
) -> List[CellSequence]:
    if rng is None:
        raise ValueError('generate_epoch needs a random stream')
    if n_sequences < 1:
        raise Fatal(f'an epoch needs at least one sequence (got {n_sequences})')
    if not 0.0 <= balance <= 1.0:
        raise Fatal(f'class balance {balance} outside [0, 1]')

    n_all = int(math.floor(balance * n_sequences + 0.5))
    labels = [Diagnosis.ALL] * n_all + [Diagnosis.HEALTHY] * (n_sequences - n_all)
    labels = [labels[i] for i in rng.permutation(n_sequences)]

    return [
        generate_sequence(pools, length, label, n_cells_range, policy, child)
        for label, child in zip(labels, spawn_rngs(rng, n_sequences))
    ]


def bag_to_sequences(
    bag: PatientBag, length: int, packing: str = 'chunk'
) -> List[CellSequence]:
    """Pack a patient's cells into evaluation sequences, in bag order

    A chunk whose cells all carry a class is labelled by its own blast count,
    so an ALL bag can yield HEALTHY chunks. Chunks with any unlabelled cell
    take the bag's diagnosis and a blast count of -1. Patient predictions
    only read the chunk probabilities.
    """
    if bag.is_empty:
        raise Fatal(f'patient {bag.patient_id}: cannot pack an empty bag')
    if packing not in PACKING_MODES:
        raise Fatal(f'unknown packing mode {packing!r}')
    if packing == 'single':
        length = len(bag.cells)
    if length < 1:
        raise Fatal(f'sequence length must be >= 1 (got {length})')

    blank = blank_crop(bag.cells[0].size)
    sequences = []
    for start in range(0, len(bag.cells), length):
        chunk = list(bag.cells[start : start + length])
        count = bag.with_cells(chunk).blast_count()
        if count is None:
            label, blast_count = bag.diagnosis, -1
        else:
            label = Diagnosis.ALL if count >= 1 else Diagnosis.HEALTHY
            blast_count = count
        entries = chunk + [blank] * (length - len(chunk))
        sequences.append(CellSequence(entries, label, blast_count))
    return sequences


def save_epoch(
    sequences: Sequence[CellSequence],
    path: Union[str, Path],
    config_digest: Optional[str] = None,
) -> None:
    """Store sequences as crop-id references; blanks are null"""
    document: Dict[str, Any] = {
        'version': EPOCH_VERSION,
        'config_digest': config_digest,
        'sequences': [
            {
                'entries': [None if e.is_blank else e.crop_id for e in seq.entries],
                'label': seq.label.value,
                'blast_count': seq.blast_count,
            }
            for seq in sequences
        ],
    }
    with open(path, 'w') as f:
        json.dump(document, f, indent=1, sort_keys=True)
        f.write('\n')


def load_epoch(
    path: Union[str, Path],
    pools: CellPools,
    policy: Optional[AugmentationPolicy] = None,
    rng: Optional[np.random.Generator] = None,
) -> List[CellSequence]:
    """Re-materialise a stored epoch from the pools, augmenting on the way"""
    try:
        with open(path) as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise Fatal(f'unable to read epoch {path}: {exc}') from None

    if document.get('version') != EPOCH_VERSION:
        raise Fatal(f'epoch {path}: unsupported version {document.get("version")!r}')

    augmenting = policy is not None and not policy.is_identity
    if augmenting and rng is None:
        raise ValueError('augmenting at load time needs a random stream')

    blank = blank_crop(pools.crop_size)
    sequences = []
    for index, raw in enumerate(document['sequences']):
        entries = []
        for crop_id in raw['entries']:
            if crop_id is None:
                entries.append(blank)
                continue
            try:
                crop = pools.by_id[crop_id]
            except KeyError:
                raise Fatal(
                    f'epoch {path}: sequence {index} references '
                    f'unknown crop {crop_id!r}'
                ) from None
            if augmenting:
                crop = augment(crop, policy, rng)  # type: ignore
            entries.append(crop)
        sequences.append(
            CellSequence(entries, Diagnosis(raw['label']), int(raw['blast_count']))
        )
    return sequences
