"""Normalized-bbox cropping over numpy pixel grids."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..transcript import ContentPart, ImageRegistry, Observation, ToolCall
from .errors import IndexOutOfRange, InvalidBBox

# products like 0.7 * 100 land a few ulps off the integer they denote
_SNAP = 1e-9


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.x1, self.y1, self.x2, self.y2
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in (x1, y1, x2, y2)):
            raise InvalidBBox(f"non-numeric bbox {self}")
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise InvalidBBox(f"bbox must satisfy 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1, got [{x1}, {y1}, {x2}, {y2}]")

    @classmethod
    def from_list(cls, values) -> "BBox":
        if not isinstance(values, (list, tuple)) or len(values) != 4:
            raise InvalidBBox(f"bbox must be 4 numbers, got {values!r}")
        return cls(*values)


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < _SNAP else v


def _span(lo: float, hi: float, size: int) -> tuple[int, int]:
    a = math.floor(_snap(lo * size))
    b = math.ceil(_snap(hi * size))
    # snapping can collapse a sliver narrower than the tolerance; keep one pixel
    if b <= a:
        b = a + 1
    if b > size:
        a, b = size - 1, size
    return a, b


def pixel_window(bbox: BBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Half-open ``(row0, row1, col0, col1)``: floor for the top-left, ceil for the bottom-right."""
    r0, r1 = _span(bbox.y1, bbox.y2, height)
    c0, c1 = _span(bbox.x1, bbox.x2, width)
    return r0, r1, c0, c1


def crop_image(image: np.ndarray, bbox: BBox | list) -> np.ndarray:
    if not isinstance(bbox, BBox):
        bbox = BBox.from_list(bbox)
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise InvalidBBox("cannot crop an empty image")
    r0, r1, c0, c1 = pixel_window(bbox, w, h)
    return np.array(image[r0:r1, c0:c1], copy=True)


def resolve_crop(call: ToolCall, registry: ImageRegistry) -> Observation:
    """Crop ``registry[image_index]``.

    The crop is carried as a pending image part; appending the observation to
    the transcript registers it under ``registry.next_index``, which the text
    note announces.
    """
    if call.name != "crop_image":
        raise ValueError(f"resolve_crop got {call.name!r}")
    index = call.arguments.get("image_index")
    if not isinstance(index, int) or not 1 <= index <= len(registry):
        raise IndexOutOfRange(f"image_index {index} out of range 1..{len(registry)}")
    cropped = crop_image(registry[index], BBox.from_list(call.arguments.get("bbox")))
    new_index = registry.next_index
    h, w = cropped.shape[:2]
    note = f"Cropped image {index}; the result ({w}x{h}) is image {new_index}."
    return Observation((ContentPart.of_text(note), ContentPart.of_image(cropped)))
