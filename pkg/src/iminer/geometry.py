"""Axis-aligned box arithmetic, IoU, and non-maximum suppression."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["Box", "ScoredBox", "iou", "nms"]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: (x1, y1) top-left, (x2, y2) bottom-right, pixels.

    Coordinates are continuous reals; degenerate boxes (zero or negative
    area) are rejected at construction rather than clamped.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"box coordinates must be finite: {self!r}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"degenerate box, requires x2 > x1 and y2 > y1: "
                f"({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def scaled(self, factor: float) -> "Box":
        """Uniformly scale all coordinates about the origin."""
        return Box(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)


@dataclass(frozen=True)
class ScoredBox:
    """A box with a confidence score, a class label, and an optional
    predicted-IoU score from an IoU head.

    Label membership in the registered class set is enforced where a
    registry exists (file loaders, world builders), not here.
    """

    box: Box
    score: float
    label: int
    iou_score: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.iou_score is not None and not (0.0 <= self.iou_score <= 1.0):
            raise ValueError(f"iou_score must lie in [0, 1], got {self.iou_score}")


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; symmetric, in [0, 1]."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area() + b.area() - inter
    return inter / union


def _sort_order(boxes: list[ScoredBox]) -> list[int]:
    # Descending score; ties by higher predicted IoU (absent counts as 0),
    # then by lower insertion index.  Keeps replay deterministic.
    def key(i: int) -> tuple[float, float, int]:
        b = boxes[i]
        return (-b.score, -(b.iou_score if b.iou_score is not None else 0.0), i)

    return sorted(range(len(boxes)), key=key)


def nms(
    boxes: list[ScoredBox],
    iou_threshold: float,
    class_wise: bool = True,
) -> list[ScoredBox]:
    """Greedy non-maximum suppression in descending score order.

    A candidate is suppressed when its IoU with an already-kept box
    strictly exceeds ``iou_threshold``; with ``class_wise`` the comparison
    only applies between boxes sharing a label.  Returns the surviving
    input objects ordered by descending score.
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    if not boxes:
        return []

    order = _sort_order(boxes)
    coords = np.array(
        [[boxes[i].box.x1, boxes[i].box.y1, boxes[i].box.x2, boxes[i].box.y2] for i in order],
        dtype=np.float64,
    )
    labels = np.array([boxes[i].label for i in order], dtype=np.int64)
    areas = (coords[:, 2] - coords[:, 0]) * (coords[:, 3] - coords[:, 1])

    kept: list[int] = []
    for pos in range(len(order)):
        if kept:
            prior = np.array(kept, dtype=np.intp)
            if class_wise:
                prior = prior[labels[prior] == labels[pos]]
            if prior.size:
                pc = coords[prior]
                ix1 = np.maximum(pc[:, 0], coords[pos, 0])
                iy1 = np.maximum(pc[:, 1], coords[pos, 1])
                ix2 = np.minimum(pc[:, 2], coords[pos, 2])
                iy2 = np.minimum(pc[:, 3], coords[pos, 3])
                inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
                overlap = inter / (areas[prior] + areas[pos] - inter)
                if np.any(overlap > iou_threshold):
                    continue
        kept.append(pos)
    return [boxes[order[pos]] for pos in kept]
