"""Domain types shared by every stage of the pipeline

Value types validate their invariants on construction and raise ValueError
when handed inconsistent data; pixel rasters are frozen (read-only numpy
arrays) so instances can be shared freely between threads.
"""

from __future__ import annotations

from typing import (
    Any,
    Dict,
    Iterable,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import json
import hashlib
import dataclasses
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image


# Crop side length; configurable per run for real data
CROP_SIZE = 64

BLANK_VALUE = 0


class CellClass(Enum):
    BLAST = 'BLAST'
    NORMAL = 'NORMAL'


class Diagnosis(Enum):
    ALL = 'ALL'
    HEALTHY = 'HEALTHY'

    @property
    def index(self) -> int:
        """Class index used by the classifier: 1 is the positive (ALL) logit"""
        return 1 if self is Diagnosis.ALL else 0

    @classmethod
    def from_index(cls, index: int) -> Diagnosis:
        return cls.ALL if index == 1 else cls.HEALTHY


def freeze(pixels: np.ndarray) -> np.ndarray:
    if pixels.flags.writeable:
        pixels = pixels.copy()
        pixels.setflags(write=False)
    return pixels


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0
    cell_class: Optional[CellClass] = None

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f'degenerate box {self.coords()}')
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f'box score {self.score} outside [0, 1]')

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def coords(self) -> Tuple[float, float, float, float]:
        return self.x_min, self.y_min, self.x_max, self.y_max

    def fits(self, width: int, height: int) -> bool:
        return (
            self.x_min >= 0
            and self.y_min >= 0
            and self.x_max <= width
            and self.y_max <= height
        )

    def with_score(self, score: float) -> BoundingBox:
        return dataclasses.replace(self, score=score)

    def to_json(self, with_score: bool = False) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            'x_min': self.x_min,
            'y_min': self.y_min,
            'x_max': self.x_max,
            'y_max': self.y_max,
            'class': None if self.cell_class is None else self.cell_class.value,
        }
        if with_score:
            out['score'] = self.score
        return out

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> BoundingBox:
        cls_name = data.get('class')
        return cls(
            x_min=float(data['x_min']),
            y_min=float(data['y_min']),
            x_max=float(data['x_max']),
            y_max=float(data['y_max']),
            score=float(data.get('score', 1.0)),
            cell_class=None if cls_name is None else CellClass(cls_name),
        )


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


class AnnotatedImage:
    def __init__(
        self,
        image_id: str,
        pixels: np.ndarray,
        boxes: Iterable[BoundingBox] = (),
        diagnosis: Optional[Diagnosis] = None,
    ):
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
            raise ValueError(
                f'{image_id}: expected HxWx3 uint8 raster, got '
                f'{pixels.shape} {pixels.dtype}'
            )

        self.image_id = image_id
        self.pixels = freeze(pixels)
        self.boxes = tuple(boxes)
        self.diagnosis = diagnosis

        for box in self.boxes:
            if not box.fits(self.width, self.height):
                raise ValueError(
                    f'{image_id}: box {box.coords()} outside '
                    f'{self.width}x{self.height} image'
                )

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def __repr__(self) -> str:
        return (
            f'<AnnotatedImage {self.image_id} {self.width}x{self.height} '
            f'boxes={len(self.boxes)}>'
        )


class CellCrop:
    def __init__(
        self,
        crop_id: str,
        pixels: np.ndarray,
        cell_class: Optional[CellClass] = None,
        is_blank: bool = False,
    ):
        if (
            pixels.ndim != 3
            or pixels.shape[0] != pixels.shape[1]
            or pixels.shape[2] != 3
            or pixels.dtype != np.uint8
        ):
            raise ValueError(
                f'{crop_id}: expected SxSx3 uint8 crop, '
                f'got {pixels.shape} {pixels.dtype}'
            )

        if is_blank:
            if cell_class is not None:
                raise ValueError(f'{crop_id}: blank crop cannot carry a cell class')
            if np.any(pixels != BLANK_VALUE):
                raise ValueError(f'{crop_id}: blank crop must hold only blank pixels')

        self.crop_id = crop_id
        self.pixels = freeze(pixels)
        self.cell_class = cell_class
        self.is_blank = is_blank

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])

    def with_pixels(self, pixels: np.ndarray) -> CellCrop:
        return CellCrop(self.crop_id, pixels, self.cell_class, self.is_blank)

    def __repr__(self) -> str:
        if self.is_blank:
            return f'<CellCrop blank {self.size}px>'
        label = '?' if self.cell_class is None else self.cell_class.value
        return f'<CellCrop {self.crop_id} {label}>'


@lru_cache(maxsize=None)
def blank_crop(size: int = CROP_SIZE) -> CellCrop:
    return CellCrop(
        'blank', np.full((size, size, 3), BLANK_VALUE, dtype=np.uint8), is_blank=True
    )


class PatientBag:
    def __init__(
        self, patient_id: str, cells: Iterable[CellCrop], diagnosis: Diagnosis
    ):
        self.patient_id = patient_id
        self.cells = tuple(cells)
        self.diagnosis = diagnosis

        if any(c.is_blank for c in self.cells):
            raise ValueError(f'patient {patient_id}: bags cannot contain blank crops')

    @property
    def is_empty(self) -> bool:
        return not self.cells

    def blast_count(self) -> Optional[int]:
        """Ground-truth blast count, or None if any cell is unlabelled"""
        if any(c.cell_class is None for c in self.cells):
            return None
        return sum(1 for c in self.cells if c.cell_class is CellClass.BLAST)

    def with_cells(self, cells: Iterable[CellCrop]) -> PatientBag:
        return PatientBag(self.patient_id, cells, self.diagnosis)

    def __len__(self) -> int:
        return len(self.cells)

    def __repr__(self) -> str:
        return (
            f'<PatientBag {self.patient_id} {self.diagnosis.value} '
            f'cells={len(self.cells)}>'
        )


class CellSequence:
    def __init__(
        self,
        entries: Sequence[CellCrop],
        label: Diagnosis,
        blast_count: int,
        pad_mask: Optional[Sequence[bool]] = None,
    ):
        self.entries = tuple(entries)
        self.pad_mask = (
            tuple(e.is_blank for e in self.entries)
            if pad_mask is None
            else tuple(bool(p) for p in pad_mask)
        )
        self.label = label
        self.blast_count = blast_count

        if not self.entries:
            raise ValueError('sequence must have at least one entry')

        if len(self.pad_mask) != len(self.entries):
            raise ValueError('pad mask length differs from entry count')

        if any(p != e.is_blank for p, e in zip(self.pad_mask, self.entries)):
            raise ValueError('pad mask disagrees with blank entries')

        if blast_count < -1:
            raise ValueError(f'invalid blast count {blast_count}')

        # -1 marks an unknown count; the label rule can only be checked when known
        if blast_count >= 0 and (label is Diagnosis.ALL) != (blast_count >= 1):
            raise ValueError(
                f'label {label.value} inconsistent with blast count {blast_count}'
            )

    def __len__(self) -> int:
        return len(self.entries)

    def cells(self) -> List[CellCrop]:
        return [e for e in self.entries if not e.is_blank]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.label.value.encode())
        h.update(str(self.blast_count).encode())
        for entry in self.entries:
            h.update(entry.crop_id.encode())
            h.update(entry.pixels.tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        return (
            f'<CellSequence L={len(self)} {self.label.value} '
            f'blasts={self.blast_count} blanks={sum(self.pad_mask)}>'
        )


SPLITS = ('train', 'test')


class ManifestRecord(NamedTuple):
    image: str
    split: str
    diagnosis: Optional[Diagnosis]
    boxes: Tuple[BoundingBox, ...]
    patient: Optional[str] = None

    @property
    def image_id(self) -> str:
        return self.image

    @property
    def patient_id(self) -> str:
        if self.patient is not None:
            return self.patient
        return Path(self.image).stem

    def to_json(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            'image': self.image,
            'split': self.split,
            'diagnosis': None if self.diagnosis is None else self.diagnosis.value,
            'boxes': [b.to_json() for b in self.boxes],
        }
        if self.patient is not None:
            out['patient'] = self.patient
        return out


class DatasetManifest(NamedTuple):
    root: Path
    records: Tuple[ManifestRecord, ...]
    synthetic: bool = False
    config_digest: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> List[ManifestRecord]:
        if name not in SPLITS:
            raise ValueError(f'unknown split {name!r}')
        return [r for r in self.records if r.split == name]

    def image_path(self, record: ManifestRecord) -> Path:
        return self.root / record.image

    def load_image(self, record: ManifestRecord) -> AnnotatedImage:
        with Image.open(self.image_path(record)) as img:
            pixels = np.asarray(img.convert('RGB'), dtype=np.uint8)
        return AnnotatedImage(record.image_id, pixels, record.boxes, record.diagnosis)

    def iter_images(self, split: Optional[str] = None) -> Iterator[AnnotatedImage]:
        records = self.records if split is None else self.split(split)
        for record in records:
            yield self.load_image(record)

    def patients(
        self, split: Optional[str] = None
    ) -> Dict[str, List[ManifestRecord]]:
        """Group records by patient, preserving first-seen order"""
        records = self.records if split is None else self.split(split)
        grouped: Dict[str, List[ManifestRecord]] = {}
        for record in records:
            grouped.setdefault(record.patient_id, []).append(record)
        return grouped


class MetricsReport(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: Optional[float]
    macro_f1: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    f1_all: Optional[float] = None
    f1_healthy: Optional[float] = None
    name: str = ''
    seed: Optional[int] = None
    config_digest: Optional[str] = None
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    extra: Dict[str, Any] = {}

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_json(self) -> Dict[str, Any]:
        return dict(self._asdict())

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> MetricsReport:
        fields = {k: data[k] for k in cls._fields if k in data}
        return cls(**fields)

    def digest(self) -> str:
        """Digest of the report content, independent of wall-clock timestamps"""
        content = self.to_json()
        content.pop('started_at')
        content.pop('finished_at')
        return sha256_hex(canonical_json(content))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), default=_json_default)


def _json_default(obj: Any) -> Any:
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.asdict(obj)
    raise TypeError(f'cannot serialise {type(obj).__name__}')


def sha256_hex(data: str) -> str:
    return hashlib.sha256(data.encode()).hexdigest()
