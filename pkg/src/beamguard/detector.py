"""Bounding-box providers used for spatial proxy labeling.

Two detectors share one output type: an oracle that reads scene metadata,
and a colour-threshold blob detector that only looks at pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

MIN_COMPONENT_AREA = 9


@dataclass(frozen=True)
class BoundingBox:
    """Box in continuous pixel coordinates; ``x_max``/``y_max`` are exclusive edges."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def inside(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


def assign_bin(bbox: BoundingBox, image_width: float, num_bins: int) -> int:
    """Horizontal bin ``ceil(x_c * A / W)`` of the box centre, clamped to 1..A."""
    if num_bins < 1:
        raise ValueError("num_bins must be positive")
    x_c = (bbox.x_min + bbox.x_max) / 2.0
    raw = math.ceil(x_c * num_bins / image_width)
    return min(max(raw, 1), num_bins)


def detect_oracle(record) -> list[BoundingBox]:
    """All vehicle boxes from the record's scene metadata, target first."""
    target = getattr(record, "target_bbox", None)
    distractors = getattr(record, "distractor_bboxes", None)
    if target is None or distractors is None:
        raise ValueError("record carries no scene metadata")
    boxes = [BoundingBox(*target)]
    boxes.extend(BoundingBox(*b) for b in distractors)
    return boxes


def detect_blob(
    image: np.ndarray,
    target_color,
    tolerance: float = 0.05,
    min_area: int = MIN_COMPONENT_AREA,
) -> list[BoundingBox]:
    """Boxes of 4-connected regions within ``tolerance`` (per channel) of a colour.

    Returned largest first.
    """
    image = np.asarray(image, dtype=np.float64)
    color = np.asarray(target_color, dtype=np.float64).reshape(1, 1, 3)
    # small slack absorbs 8-bit quantization of exact colours
    mask = np.max(np.abs(image - color), axis=-1) <= tolerance + 1e-6
    labels, count = ndimage.label(mask)  # default structure is 4-connected in 2-D
    if count == 0:
        return []
    areas = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
    boxes = []
    for idx, sl in enumerate(ndimage.find_objects(labels)):
        if sl is None or areas[idx] < min_area:
            continue
        ys, xs = sl
        boxes.append((float(areas[idx]), BoundingBox(xs.start, ys.start, xs.stop, ys.stop)))
    boxes.sort(key=lambda item: (-item[0], item[1].x_min, item[1].y_min))
    return [b for _, b in boxes]


def select_box(boxes: list[BoundingBox], rng: np.random.Generator | None = None,
               mode: str = "uniform") -> BoundingBox:
    """Pick one detection: uniformly at random, or the largest one."""
    if not boxes:
        raise ValueError("no boxes to select from")
    if mode == "largest":
        return max(boxes, key=lambda b: (b.area, -b.x_min))
    if mode != "uniform":
        raise ValueError(f"unknown selection mode {mode!r}")
    if rng is None:
        raise ValueError("uniform selection needs a generator")
    return boxes[int(rng.integers(len(boxes)))]
