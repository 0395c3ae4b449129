"""Axis-aligned box arithmetic: conversions, IoU, clipping and NMS.

Boxes are kept in normalized center form (cx, cy, w, h) relative to the
image, so the same values serve 640x640 dataset images and 512x512
training crops alike. Pixel coordinates appear only at I/O boundaries.

All functions here are pure and operate on immutable values; they are
safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

NUM_DEFECT_CLASSES = 6


class DegenerateBoxError(ValueError):
    """A box has non-positive or non-finite width/height."""


class EmptyClipError(ValueError):
    """Clipping to the image left a box with zero area."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in normalized center form."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise DegenerateBoxError(f"non-finite box: {self!r}")
        if self.w <= 0 or self.h <= 0:
            raise DegenerateBoxError(f"non-positive box size: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        """Return (x1, y1, x2, y2) corner form."""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class ScoredBox:
    """A detection: box, confidence and defect class.

    ``class_id`` is in 1..6; background (0) is never emitted as a detection.
    """

    box: Box
    score: float
    class_id: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score}")
        if not 1 <= self.class_id <= NUM_DEFECT_CLASSES:
            raise ValueError(f"class_id outside 1..{NUM_DEFECT_CLASSES}: {self.class_id}")


@dataclass(frozen=True)
class NmsParams:
    """Suppression settings used when turning raw predictions into detections."""

    iou_threshold: float = 0.5
    score_threshold: float = 0.05
    max_detections: int = 100

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold outside (0, 1): {self.iou_threshold}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")


def center_to_corner(boxes: np.ndarray) -> np.ndarray:
    """Convert an (N, 4) array of (cx, cy, w, h) to (x1, y1, x2, y2)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corner_to_center(boxes: np.ndarray) -> np.ndarray:
    """Convert an (N, 4) array of (x1, y1, x2, y2) to (cx, cy, w, h)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + wh / 2, wh], axis=-1)


def iou_matrix(corners_a: np.ndarray, corners_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two corner-form box arrays.

    Args:
        corners_a: (N, 4) array of (x1, y1, x2, y2).
        corners_b: (M, 4) array of (x1, y1, x2, y2).

    Returns:
        (N, M) array of IoU values in [0, 1].
    """
    a = np.asarray(corners_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(corners_b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def iou(a: Box, b: Box) -> float:
    """Jaccard overlap of two boxes: area(a and b) / area(a or b)."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def clip_box(b: Box) -> Box:
    """Clamp a box's corners to [0, 1]^2.

    Raises:
        EmptyClipError: if the clamped box has zero width or height.
    """
    x1, y1, x2, y2 = b.corners()
    if 0.0 <= x1 and 0.0 <= y1 and x2 <= 1.0 and y2 <= 1.0:
        return b
    x1, y1 = max(x1, 0.0), max(y1, 0.0)
    x2, y2 = min(x2, 1.0), min(y2, 1.0)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise EmptyClipError(f"box fully outside the image: {b!r}")
    return Box.from_corners(x1, y1, x2, y2)


def nms(
    candidates: Sequence[ScoredBox],
    iou_threshold: float = 0.5,
    score_threshold: float = 0.05,
    max_detections: int = 100,
) -> list[ScoredBox]:
    """Greedy per-class non-maximum suppression.

    Per class independently: drop candidates below ``score_threshold``,
    sort by descending score (ties broken by input order), then greedily
    keep a box and suppress remaining same-class boxes whose IoU with a
    kept box exceeds ``iou_threshold``. Survivors across all classes are
    truncated to the ``max_detections`` highest-scoring ones.

    Returns the kept boxes sorted by descending score.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold outside (0, 1): {iou_threshold}")
    if not candidates:
        return []

    scores = np.array([c.score for c in candidates], dtype=np.float64)
    classes = np.array([c.class_id for c in candidates], dtype=np.int64)
    corners = center_to_corner(
        np.array([[c.box.cx, c.box.cy, c.box.w, c.box.h] for c in candidates])
    )

    kept: list[int] = []
    for class_id in np.unique(classes):
        idx = np.flatnonzero((classes == class_id) & (scores >= score_threshold))
        if idx.size == 0:
            continue
        # stable sort on -score keeps input order among ties
        idx = idx[np.argsort(-scores[idx], kind="stable")]
        boxes = corners[idx]
        alive = np.ones(idx.size, dtype=bool)
        for i in range(idx.size):
            if not alive[i]:
                continue
            kept.append(int(idx[i]))
            rest = np.flatnonzero(alive[i + 1 :]) + i + 1
            if rest.size:
                overlaps = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
                alive[rest[overlaps > iou_threshold]] = False

    kept.sort()  # restore input order so the final sort ties break correctly
    kept_arr = np.array(kept, dtype=np.int64)
    order = np.argsort(-scores[kept_arr], kind="stable")[:max_detections]
    return [candidates[int(kept_arr[i])] for i in order]
