"""Default-box generation for the per-group prediction grids.

Each scale group tiles its grid with three boxes per location (aspect
ratios 0.5, 1.0, 2.0 by default) at a fixed per-group size. Anchors are
deliberately not clipped to the image: boxes near the border overhang,
which keeps matching quality intact; clipping happens only on decoded
predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box, center_to_corner

DEFAULT_RATIOS = (0.5, 1.0, 2.0)
DEFAULT_SCALES = (0.04, 0.08, 0.16)


class AnchorConfigError(ValueError):
    """Invalid anchor configuration (grids/scales/ratios mismatch)."""


@dataclass(frozen=True)
class AnchorSet:
    """The full ordered list of default boxes across all scale groups.

    Order is deterministic: group-major, then row-major over (row, col),
    then ratio order. ``boxes`` is an (N, 4) center-form array.
    """

    boxes: np.ndarray
    group_of: np.ndarray
    grid_dims: tuple[tuple[int, int], ...]
    ratios: tuple[float, ...] = field(default=DEFAULT_RATIOS)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def corners(self) -> np.ndarray:
        """(N, 4) corner-form view of the anchors."""
        return center_to_corner(self.boxes)

    def box(self, index: int) -> Box:
        cx, cy, w, h = self.boxes[index]
        return Box(float(cx), float(cy), float(w), float(h))


def generate_anchors(
    grid_dims: Sequence[tuple[int, int]],
    scales: Sequence[float],
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> AnchorSet:
    """Generate the default boxes for every grid cell of every group.

    For group g with scale s, cell (i, j) of an (m, n) grid and ratio r:
    center = ((j + 0.5) / n, (i + 0.5) / m), w = s * sqrt(r), h = s / sqrt(r).

    Args:
        grid_dims: per-group (rows, cols) of the prediction grid.
        scales: per-group box size as a fraction of the input image size;
            must be strictly increasing (small, median, large).
        ratios: aspect ratio family shared by all groups.

    Raises:
        AnchorConfigError: empty ratios, mismatched lengths, non-positive
            grid sizes, or non-increasing scales.
    """
    if len(ratios) == 0:
        raise AnchorConfigError("at least one aspect ratio is required")
    if len(grid_dims) != len(scales):
        raise AnchorConfigError(
            f"{len(grid_dims)} grids but {len(scales)} scales; need one scale per group"
        )
    if any(s <= 0 for s in scales):
        raise AnchorConfigError(f"scales must be positive: {scales}")
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise AnchorConfigError(f"scales must be strictly increasing: {scales}")
    if any(r <= 0 for r in ratios):
        raise AnchorConfigError(f"ratios must be positive: {ratios}")
    if any(m < 1 or n < 1 for m, n in grid_dims):
        raise AnchorConfigError(f"grid dims must be >= 1: {grid_dims}")

    ratios_arr = np.asarray(ratios, dtype=np.float64)
    num_ratios = ratios_arr.size
    per_group = []
    group_of = []
    for g, ((m, n), scale) in enumerate(zip(grid_dims, scales)):
        ii, jj = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
        cx = np.repeat(((jj + 0.5) / n).ravel(), num_ratios)
        cy = np.repeat(((ii + 0.5) / m).ravel(), num_ratios)
        w = np.tile(scale * np.sqrt(ratios_arr), m * n)
        h = np.tile(scale / np.sqrt(ratios_arr), m * n)
        per_group.append(np.stack([cx, cy, w, h], axis=1))
        group_of.append(np.full(m * n * num_ratios, g, dtype=np.int64))

    return AnchorSet(
        boxes=np.concatenate(per_group, axis=0),
        group_of=np.concatenate(group_of, axis=0),
        grid_dims=tuple((int(m), int(n)) for m, n in grid_dims),
        ratios=tuple(float(r) for r in ratios),
    )


def grid_dims_for(feature_hw: tuple[int, int], first_strides: Sequence[int]) -> tuple[tuple[int, int], ...]:
    """Per-group prediction grid sizes from the backbone feature resolution.

    Each group predicts at the resolution of its smallest pooling stride;
    non-divisible sizes round up (ceiling division, matching the replicate
    edge padding used by the pooling itself).
    """
    fh, fw = feature_hw
    return tuple(
        (math.ceil(fh / s), math.ceil(fw / s)) for s in first_strides
    )
