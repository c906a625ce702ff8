from __future__ import annotations

from typing import Any, Dict, Iterable, List, Optional, Union

import json
import logging
from pathlib import Path

from PIL import Image

from .core import (
    SPLITS,
    BoundingBox,
    DatasetManifest,
    Diagnosis,
    ManifestRecord,
)
from .errors import ManifestError


__all__ = ('MANIFEST_VERSION', 'load_manifest', 'make_manifest', 'save_manifest')

MANIFEST_VERSION = 1

logger = logging.getLogger(__name__)


def make_manifest(
    root: Union[str, Path],
    records: Iterable[ManifestRecord],
    synthetic: bool = False,
    config_digest: Optional[str] = None,
) -> DatasetManifest:
    ordered = tuple(sorted(records, key=lambda r: r.image))
    return DatasetManifest(
        root=Path(root),
        records=ordered,
        synthetic=synthetic,
        config_digest=config_digest,
    )


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    doc: Dict[str, Any] = {
        'version': MANIFEST_VERSION,
        'records': [r.to_json() for r in manifest.records],
    }
    if manifest.synthetic:
        doc['synthetic'] = True
    if manifest.config_digest is not None:
        doc['config_digest'] = manifest.config_digest

    with open(path, 'w') as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write('\n')


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ManifestError(f'manifest not found: {path}') from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f'manifest {path} is not valid JSON: {exc}') from None

    if not isinstance(doc, dict) or doc.get('version') != MANIFEST_VERSION:
        version = doc.get('version') if isinstance(doc, dict) else None
        raise ManifestError(
            f'unsupported manifest version {version!r} in {path} '
            f'(expected {MANIFEST_VERSION})'
        )

    raw_records = doc.get('records')
    if not isinstance(raw_records, list):
        raise ManifestError(f'manifest {path} has no record list')

    root = path.parent
    records: List[ManifestRecord] = []
    seen: Dict[str, int] = {}

    for index, raw in enumerate(raw_records):
        record = _parse_record(raw, index)

        if record.image in seen:
            raise ManifestError(
                f'duplicate image {record.image!r} '
                f'(first at record {seen[record.image]})',
                record_index=index,
            )
        seen[record.image] = index

        _check_image(root, record, index, raw)
        records.append(record)

    manifest = make_manifest(
        root,
        records,
        synthetic=bool(doc.get('synthetic', False)),
        config_digest=doc.get('config_digest'),
    )
    logger.debug(
        'loaded manifest',
        extra={'path': str(path), 'records': len(manifest.records)},
    )
    return manifest


def _parse_record(raw: Any, index: int) -> ManifestRecord:
    if not isinstance(raw, dict):
        raise ManifestError('record is not an object', record_index=index)

    try:
        image = raw['image']
        split = raw['split']
        diagnosis_name = raw.get('diagnosis')
        raw_boxes = raw.get('boxes', [])
    except KeyError as exc:
        raise ManifestError(
            f'missing field {exc.args[0]!r}',
            record_index=index,
            extended=build_record_context(raw),
        ) from None

    if not isinstance(image, str) or not image:
        raise ManifestError('image path must be a non-empty string', record_index=index)

    if split not in SPLITS:
        raise ManifestError(
            f'split must be one of {"|".join(SPLITS)}, got {split!r}',
            record_index=index,
        )

    try:
        diagnosis = None if diagnosis_name is None else Diagnosis(diagnosis_name)
    except ValueError:
        raise ManifestError(
            f'unknown diagnosis {diagnosis_name!r}', record_index=index
        ) from None

    boxes = []
    for box_index, raw_box in enumerate(raw_boxes):
        try:
            boxes.append(BoundingBox.from_json(raw_box))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(
                f'box {box_index} is malformed: {exc}',
                record_index=index,
                extended=build_record_context(raw_box),
            ) from None

    patient = raw.get('patient')
    return ManifestRecord(
        image=image,
        split=split,
        diagnosis=diagnosis,
        boxes=tuple(boxes),
        patient=None if patient is None else str(patient),
    )


def _check_image(root: Path, record: ManifestRecord, index: int, raw: Any) -> None:
    image_path = root / record.image
    if not image_path.is_file():
        raise ManifestError(f'image not found: {image_path}', record_index=index)

    # Only the header is read here
    with Image.open(image_path) as img:
        width, height = img.size

    for box_index, box in enumerate(record.boxes):
        if not box.fits(width, height):
            raise ManifestError(
                f'box {box_index} {box.coords()} lies outside the '
                f'{width}x{height} image {record.image}',
                record_index=index,
                extended=build_record_context(raw),
            )


def build_record_context(raw: Any) -> str:
    try:
        text = json.dumps(raw, indent=2, sort_keys=True)
    except TypeError:
        text = repr(raw)
    return '\n'.join(f'  | {line}' for line in text.splitlines())
