from __future__ import annotations

from typing import Iterable, List, Tuple

import math

import numpy as np
from PIL import Image

from .core import BLANK_VALUE, CROP_SIZE, AnnotatedImage, BoundingBox, CellCrop
from .errors import Fatal


def pixel_bounds(
    box: BoundingBox, width: int, height: int
) -> Tuple[int, int, int, int]:
    """Integer pixel window covering the box, clipped to the image"""
    x0 = max(0, int(math.floor(box.x_min)))
    y0 = max(0, int(math.floor(box.y_min)))
    x1 = min(width, int(math.ceil(box.x_max)))
    y1 = min(height, int(math.ceil(box.y_max)))
    return x0, y0, x1, y1


def crop_box(
    image: AnnotatedImage, box: BoundingBox, crop_id: str, size: int = CROP_SIZE
) -> CellCrop:
    x0, y0, x1, y1 = pixel_bounds(box, image.width, image.height)
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise Fatal(
            f'{crop_id}: box {box.coords()} is degenerate after clipping to '
            f'{image.width}x{image.height}'
        )

    region = image.pixels[y0:y1, x0:x1]
    return CellCrop(crop_id, letterbox(region, size), box.cell_class)


def letterbox(region: np.ndarray, size: int) -> np.ndarray:
    """Resize with preserved aspect so the longer side is `size`, then pad"""
    h, w = region.shape[:2]
    if h == size and w == size:
        return np.array(region, dtype=np.uint8)

    scale = size / max(h, w)
    new_w = max(1, min(size, int(round(w * scale))))
    new_h = max(1, min(size, int(round(h * scale))))

    resized = np.asarray(
        Image.fromarray(np.ascontiguousarray(region)).resize(
            (new_w, new_h), Image.Resampling.BILINEAR
        ),
        dtype=np.uint8,
    )

    out = np.full((size, size, 3), BLANK_VALUE, dtype=np.uint8)
    top = (size - new_h) // 2
    left = (size - new_w) // 2
    out[top : top + new_h, left : left + new_w] = resized
    return out


def crop_boxes(
    image: AnnotatedImage, boxes: Iterable[BoundingBox], size: int = CROP_SIZE
) -> List[CellCrop]:
    return [
        crop_box(image, box, f'{image.image_id}#{index}', size)
        for index, box in enumerate(boxes)
    ]
