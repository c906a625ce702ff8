"""Procedural blood-smear generator with exact ground truth

White cells are drawn as a cytoplasm ellipse around a nucleus. Blasts get a
larger, irregular (perturbed-radius polygon) nucleus with a higher
nucleus-to-cell ratio, a lighter chromatin tint and visible nucleoli; normal
cells get a small dense nucleus. Pale red-cell discs and smoothed noise
provide background texture, and a per-image stain jitter shifts the colour
balance.
"""

from __future__ import annotations

from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.draw import disk, ellipse, polygon
from skimage.filters import gaussian

from .config import JsonConfig
from .core import (
    CROP_SIZE,
    AnnotatedImage,
    BoundingBox,
    CellClass,
    CellCrop,
    DatasetManifest,
    Diagnosis,
    ManifestRecord,
    PatientBag,
    box_iou,
)
from .crops import crop_boxes
from .errors import InfeasibleConfig
from .manifest import make_manifest, save_manifest
from .rng import spawn_rngs


__all__ = (
    'CellSpec',
    'SynthConfig',
    'corpus_digest',
    'generate_corpus',
    'generate_patient',
    'generate_patient_with_specs',
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
CONFIG_NAME = 'synth_config.json'

_PLACEMENT_ATTEMPTS = 1000
_BOX_PAD = 1.5

_BACKGROUND = np.array([1.0, 0.90, 0.93])
_RBC = np.array([0.93, 0.72, 0.76])
_CYTOPLASM = {
    CellClass.NORMAL: np.array([0.82, 0.74, 0.89]),
    CellClass.BLAST: np.array([0.72, 0.72, 0.92]),
}
_NUCLEUS = {
    CellClass.NORMAL: np.array([0.30, 0.14, 0.44]),
    CellClass.BLAST: np.array([0.47, 0.33, 0.64]),
}
_NUCLEOLUS = np.array([0.64, 0.53, 0.78])


@dataclass(frozen=True)
class SynthConfig(JsonConfig):
    image_size: int = 256
    cells_per_image: Tuple[int, int] = (3, 6)
    blast_fraction: float = 0.3
    normal_nucleus_radius: Tuple[float, float] = (6.0, 9.0)
    blast_nucleus_radius: Tuple[float, float] = (12.0, 15.0)
    radius_margin: float = 2.0
    blast_irregularity: float = 0.18
    normal_cell_ratio: float = 1.8
    blast_cell_ratio: float = 1.35
    background_tint: Tuple[float, float] = (0.88, 0.98)
    stain_jitter: float = 0.06
    red_cells_per_image: int = 14
    overlap_iou: float = 0.0
    noise_sigma: float = 0.015
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in (
            'cells_per_image',
            'normal_nucleus_radius',
            'blast_nucleus_radius',
            'background_tint',
        ):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise InfeasibleConfig(f'synth: {name} range ({lo}, {hi}) is empty')

        if self.blast_nucleus_radius[0] < (
            self.normal_nucleus_radius[1] + self.radius_margin
        ):
            raise InfeasibleConfig(
                'synth: blast nucleus radii must start at least '
                f'{self.radius_margin} above the largest normal radius'
            )

        if not 0.0 < self.blast_fraction <= 1.0:
            raise InfeasibleConfig(
                f'synth: blast fraction {self.blast_fraction} outside (0, 1]'
            )

        if not 0.0 <= self.blast_irregularity < self.blast_cell_ratio * 0.9 - 1.0:
            raise InfeasibleConfig(
                'synth: blast irregularity would push nuclei outside the cytoplasm'
            )

        if not 0.0 <= self.overlap_iou < 1.0:
            raise InfeasibleConfig(f'synth: overlap budget {self.overlap_iou}')

        side = 2 * (self.max_cell_radius() + _BOX_PAD)
        if side >= self.image_size:
            raise InfeasibleConfig(
                f'synth: cells up to {side:.0f}px do not fit a '
                f'{self.image_size}px image'
            )

        # Random sequential placement stalls well before the packing limit
        budget = 0.45 * (self.image_size - side) ** 2
        if self.cells_per_image[1] * side * side > budget:
            raise InfeasibleConfig(
                f'synth: {self.cells_per_image[1]} cells of {side:.0f}px cannot be '
                f'placed in a {self.image_size}px image without exceeding the '
                'overlap budget'
            )

    def max_cell_radius(self) -> float:
        return max(
            self.normal_nucleus_radius[1] * self.normal_cell_ratio,
            self.blast_nucleus_radius[1] * self.blast_cell_ratio,
        )


class CellSpec(NamedTuple):
    """Generator bookkeeping for one rendered white cell"""

    cell_class: CellClass
    center: Tuple[float, float]
    cell_radii: Tuple[float, float]
    rotation: float
    nucleus_radius: float
    box: BoundingBox


def generate_patient(
    config: SynthConfig,
    diagnosis: Diagnosis,
    n_images: int,
    rng: np.random.Generator,
    patient_id: str = 'patient',
) -> Tuple[List[AnnotatedImage], PatientBag]:
    images, bag, _ = generate_patient_with_specs(
        config, diagnosis, n_images, rng, patient_id
    )
    return images, bag


def generate_patient_with_specs(
    config: SynthConfig,
    diagnosis: Diagnosis,
    n_images: int,
    rng: np.random.Generator,
    patient_id: str = 'patient',
    crop_size: int = CROP_SIZE,
) -> Tuple[List[AnnotatedImage], PatientBag, List[List[CellSpec]]]:
    if n_images < 1:
        raise InfeasibleConfig(f'patient {patient_id}: n_images must be >= 1')

    plan = _plan_classes(config, diagnosis, n_images, rng)
    layouts = [_place_cells(config, classes, rng) for classes in plan]

    images: List[AnnotatedImage] = []
    cells: List[CellCrop] = []
    for index, specs in enumerate(layouts):
        image_id = f'{patient_id}/img{index:02d}'
        pixels = _render(config, specs, rng)
        image = AnnotatedImage(
            image_id, pixels, [s.box for s in specs], diagnosis=diagnosis
        )
        images.append(image)
        cells.extend(crop_boxes(image, image.boxes, crop_size))

    return images, PatientBag(patient_id, cells, diagnosis), layouts


def _plan_classes(
    config: SynthConfig,
    diagnosis: Diagnosis,
    n_images: int,
    rng: np.random.Generator,
) -> List[List[CellClass]]:
    lo, hi = config.cells_per_image
    plan: List[List[CellClass]] = []
    for _ in range(n_images):
        count = int(rng.integers(lo, hi + 1))
        if diagnosis is Diagnosis.HEALTHY:
            plan.append([CellClass.NORMAL] * count)
            continue
        draws = rng.random(count) < config.blast_fraction
        plan.append([CellClass.BLAST if d else CellClass.NORMAL for d in draws])

    if diagnosis is Diagnosis.ALL and not any(
        c is CellClass.BLAST for classes in plan for c in classes
    ):
        # Every ALL patient shows at least one witness
        flat = [(i, j) for i, classes in enumerate(plan) for j in range(len(classes))]
        i, j = flat[int(rng.integers(len(flat)))]
        plan[i][j] = CellClass.BLAST

    return plan


def _place_cells(
    config: SynthConfig, classes: Sequence[CellClass], rng: np.random.Generator
) -> List[CellSpec]:
    size = config.image_size
    specs: List[CellSpec] = []

    for cell_class in classes:
        if cell_class is CellClass.BLAST:
            nucleus_r = rng.uniform(*config.blast_nucleus_radius)
            ratio = config.blast_cell_ratio
        else:
            nucleus_r = rng.uniform(*config.normal_nucleus_radius)
            ratio = config.normal_cell_ratio

        rx = nucleus_r * ratio * rng.uniform(0.97, 1.03)
        ry = nucleus_r * ratio * rng.uniform(0.92, 1.0)
        rotation = rng.uniform(-math.pi / 2, math.pi / 2)
        half_w = math.hypot(rx * math.cos(rotation), ry * math.sin(rotation)) + _BOX_PAD
        half_h = math.hypot(rx * math.sin(rotation), ry * math.cos(rotation)) + _BOX_PAD

        for _ in range(_PLACEMENT_ATTEMPTS):
            cx = rng.uniform(half_w + 1, size - half_w - 1)
            cy = rng.uniform(half_h + 1, size - half_h - 1)
            box = BoundingBox(
                cx - half_w, cy - half_h, cx + half_w, cy + half_h, 1.0, cell_class
            )
            if all(box_iou(box, s.box) <= config.overlap_iou for s in specs):
                break
        else:
            raise InfeasibleConfig(
                f'synth: unable to place {len(classes)} cells in a {size}px image '
                f'within overlap budget {config.overlap_iou}'
            )

        specs.append(
            CellSpec(
                cell_class=cell_class,
                center=(cx, cy),
                cell_radii=(rx, ry),
                rotation=rotation,
                nucleus_radius=float(nucleus_r),
                box=box,
            )
        )

    return specs


def _render(
    config: SynthConfig, specs: Sequence[CellSpec], rng: np.random.Generator
) -> np.ndarray:
    size = config.image_size
    shape = (size, size)
    tint = rng.uniform(*config.background_tint)

    canvas = np.empty((size, size, 3), dtype=np.float64)
    canvas[:] = _BACKGROUND * tint

    for _ in range(config.red_cells_per_image):
        r = rng.uniform(7.0, 11.0)
        rr, cc = disk((rng.uniform(0, size), rng.uniform(0, size)), r, shape=shape)
        canvas[rr, cc] = _RBC * tint

    for spec in specs:
        _draw_cell(canvas, spec, config, rng)

    jitter = config.stain_jitter
    channel_gain = 1.0 + rng.uniform(-jitter, jitter, size=3)
    brightness = 1.0 + rng.uniform(-jitter, jitter)
    canvas = canvas * channel_gain * brightness

    canvas = gaussian(canvas, sigma=0.7, channel_axis=-1)
    texture = gaussian(rng.normal(0.0, 1.0, size=shape), sigma=2.0)
    canvas += (texture * 4 * config.noise_sigma)[..., None]
    canvas += rng.normal(0.0, config.noise_sigma, size=canvas.shape)

    return np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)


def _draw_cell(
    canvas: np.ndarray,
    spec: CellSpec,
    config: SynthConfig,
    rng: np.random.Generator,
) -> None:
    shape = canvas.shape[:2]
    cx, cy = spec.center
    rx, ry = spec.cell_radii

    rr, cc = ellipse(cy, cx, ry, rx, shape=shape, rotation=spec.rotation)
    canvas[rr, cc] = _CYTOPLASM[spec.cell_class]

    r = spec.nucleus_radius
    if spec.cell_class is CellClass.BLAST:
        angles = np.linspace(0.0, 2 * math.pi, 48, endpoint=False)
        wobble = np.zeros_like(angles)
        for harmonic in (2, 3, 4, 5):
            amplitude = rng.uniform(-1, 1)
            wobble += amplitude * np.sin(harmonic * angles + rng.uniform(0, 6.3))
        wobble /= max(1.0, float(np.abs(wobble).max()))
        radii = r * (1.0 + config.blast_irregularity * wobble)
        rr, cc = polygon(
            cy + radii * np.sin(angles), cx + radii * np.cos(angles), shape=shape
        )
        canvas[rr, cc] = _NUCLEUS[CellClass.BLAST]

        for _ in range(int(rng.integers(1, 4))):
            offset = rng.uniform(0, 0.45 * r)
            theta = rng.uniform(0, 2 * math.pi)
            rr, cc = disk(
                (cy + offset * math.sin(theta), cx + offset * math.cos(theta)),
                rng.uniform(1.5, 2.5),
                shape=shape,
            )
            canvas[rr, cc] = _NUCLEOLUS
    else:
        offset = rng.uniform(0, 0.25 * r)
        theta = rng.uniform(0, 2 * math.pi)
        rr, cc = ellipse(
            cy + offset * math.sin(theta),
            cx + offset * math.cos(theta),
            r * rng.uniform(0.9, 1.0),
            r,
            shape=shape,
            rotation=rng.uniform(-math.pi / 2, math.pi / 2),
        )
        canvas[rr, cc] = _NUCLEUS[CellClass.NORMAL]


def generate_corpus(
    config: SynthConfig,
    n_all: int,
    n_healthy: int,
    rng: np.random.Generator,
    out_dir: Union[str, Path],
    images_per_patient: int = 2,
    test_fraction: float = 0.15,
    workers: int = 1,
    config_digest: Optional[str] = None,
) -> DatasetManifest:
    if n_all < 0 or n_healthy < 0 or n_all + n_healthy < 1:
        raise InfeasibleConfig(
            f'synth: need at least one patient (got {n_all} ALL, {n_healthy} HEALTHY)'
        )

    out_dir = Path(out_dir)
    diagnoses = [Diagnosis.ALL] * n_all + [Diagnosis.HEALTHY] * n_healthy
    patient_ids = [f'p{i:04d}_{d.value}' for i, d in enumerate(diagnoses)]

    n_test = int(round(test_fraction * len(diagnoses)))
    test_ids = {patient_ids[i] for i in rng.permutation(len(diagnoses))[:n_test]}

    patient_rngs = spawn_rngs(rng, len(diagnoses))

    def render_patient(index: int) -> List[AnnotatedImage]:
        images, _ = generate_patient(
            config,
            diagnoses[index],
            images_per_patient,
            patient_rngs[index],
            patient_ids[index],
        )
        return images

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rendered = list(pool.map(render_patient, range(len(diagnoses))))

    records: List[ManifestRecord] = []
    for patient_id, diagnosis, images in zip(patient_ids, diagnoses, rendered):
        split = 'test' if patient_id in test_ids else 'train'
        for image in images:
            rel = f'images/{image.image_id}.png'
            path = out_dir / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.array(image.pixels)).save(path, format='PNG')
            records.append(
                ManifestRecord(
                    image=rel,
                    split=split,
                    diagnosis=diagnosis,
                    boxes=image.boxes,
                    patient=patient_id,
                )
            )

    manifest = make_manifest(
        out_dir, records, synthetic=True, config_digest=config_digest
    )
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    config.save(out_dir / CONFIG_NAME)

    logger.info(
        'generated corpus',
        extra={
            'out_dir': str(out_dir),
            'patients': len(diagnoses),
            'images': len(records),
            'test_patients': n_test,
        },
    )
    return manifest


def corpus_digest(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for record in manifest.records:
        h.update(repr(record.to_json()).encode())
        h.update(manifest.image_path(record).read_bytes())
    return h.hexdigest()


def class_counts(manifest: DatasetManifest) -> Dict[str, int]:
    counts = {c.value: 0 for c in CellClass}
    for record in manifest.records:
        for box in record.boxes:
            if box.cell_class is not None:
                counts[box.cell_class.value] += 1
    return counts
