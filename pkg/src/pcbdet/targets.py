"""Anchor-to-ground-truth matching and box offset encoding.

Matching runs in two phases. First every ground-truth box claims its
highest-overlap anchor so no defect goes unrepresented; when two ground
truths want the same anchor, the higher overlap wins and the loser moves
to its next-best anchor (ties break toward the lower ground-truth
index). Second, every remaining anchor whose overlap with some ground
truth exceeds the threshold is matched to its argmax ground truth.

Offsets follow the usual anchor parametrization: center deltas scaled by
anchor size, log size ratios. Encoding then decoding through the same
anchor is exact up to float64 rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .anchors import AnchorSet
from .data import Annotation
from .geometry import Box, center_to_corner, iou_matrix

MATCH_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class MatchResult:
    """Per-anchor assignment produced by :func:`match`.

    Attributes:
        matched_gt_of: (A,) int array, index into the ground-truth list,
            -1 for background anchors.
        matched_class_of: (A,) int array, class id 1..6 for matched
            anchors, 0 for background.
        regression_targets: (A, 4) float64 encoded offsets, zeros for
            background rows.
        claimed_anchor_of: (G,) int array, the anchor each ground truth
            claimed in the forced phase.
    """

    matched_gt_of: np.ndarray
    matched_class_of: np.ndarray
    regression_targets: np.ndarray
    claimed_anchor_of: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return np.flatnonzero(self.matched_gt_of >= 0)

    @property
    def background(self) -> np.ndarray:
        return np.flatnonzero(self.matched_gt_of < 0)

    @property
    def num_matched(self) -> int:
        return int(np.count_nonzero(self.matched_gt_of >= 0))


def encode(gt: Box, anchor: Box) -> np.ndarray:
    """Encode one ground-truth box against one anchor as a (4,) offset."""
    return np.array(
        [
            (gt.cx - anchor.cx) / anchor.w,
            (gt.cy - anchor.cy) / anchor.h,
            np.log(gt.w / anchor.w),
            np.log(gt.h / anchor.h),
        ],
        dtype=np.float64,
    )


def decode(offsets: np.ndarray, anchor: Box) -> Box:
    """Invert :func:`encode` for one anchor."""
    tx, ty, tw, th = (float(v) for v in offsets)
    return Box(
        cx=anchor.cx + tx * anchor.w,
        cy=anchor.cy + ty * anchor.h,
        w=anchor.w * np.exp(tw),
        h=anchor.h * np.exp(th),
    )


def encode_boxes(gt_boxes: np.ndarray, anchor_boxes: np.ndarray) -> np.ndarray:
    """Row-wise :func:`encode` for (N, 4) center-form arrays."""
    gt = np.asarray(gt_boxes, dtype=np.float64)
    anchors = np.asarray(anchor_boxes, dtype=np.float64)
    out = np.empty_like(gt)
    out[:, 0] = (gt[:, 0] - anchors[:, 0]) / anchors[:, 2]
    out[:, 1] = (gt[:, 1] - anchors[:, 1]) / anchors[:, 3]
    out[:, 2:] = np.log(gt[:, 2:] / anchors[:, 2:])
    return out


def decode_boxes(offsets: np.ndarray, anchor_boxes: np.ndarray) -> np.ndarray:
    """Row-wise :func:`decode` for (N, 4) arrays, returns center form."""
    t = np.asarray(offsets, dtype=np.float64)
    anchors = np.asarray(anchor_boxes, dtype=np.float64)
    out = np.empty_like(t)
    out[:, 0] = anchors[:, 0] + t[:, 0] * anchors[:, 2]
    out[:, 1] = anchors[:, 1] + t[:, 1] * anchors[:, 3]
    out[:, 2:] = anchors[:, 2:] * np.exp(t[:, 2:])
    return out


def _forced_claims(overlap: np.ndarray) -> np.ndarray:
    """Resolve the forced phase: one distinct anchor per ground truth.

    Each ground truth wants its highest-overlap anchor. Conflicts are
    resolved by overlap (higher wins, lower gt index on exact ties); the
    loser excludes that anchor and contests its next-best. Returns a (G,)
    array of claimed anchor indices, -1 when a ground truth ran out of
    anchors (only possible when G exceeds the anchor count).
    """
    num_gt, num_anchors = overlap.shape
    claimed_by = np.full(num_anchors, -1, dtype=np.int64)
    claim_of = np.full(num_gt, -1, dtype=np.int64)
    excluded = [set() for _ in range(num_gt)]
    pending = list(range(num_gt))
    while pending:
        g = pending.pop(0)
        row = overlap[g].copy()
        if excluded[g]:
            row[list(excluded[g])] = -np.inf
        if not np.isfinite(row).any():
            continue
        a = int(np.argmax(row))
        holder = claimed_by[a]
        if holder < 0:
            claimed_by[a] = g
            claim_of[g] = a
            continue
        # contested: higher overlap keeps the anchor, ties keep the lower index
        if overlap[g, a] > overlap[holder, a] or (
            overlap[g, a] == overlap[holder, a] and g < holder
        ):
            claimed_by[a] = g
            claim_of[g] = a
            claim_of[holder] = -1
            excluded[holder].add(a)
            pending.append(holder)
        else:
            excluded[g].add(a)
            pending.append(g)
    return claim_of


def match(
    anchors: AnchorSet,
    ground_truths: Sequence[Annotation],
    iou_threshold: float = MATCH_IOU_THRESHOLD,
) -> MatchResult:
    """Assign anchors to ground truths and build regression targets.

    Args:
        anchors: the anchor set predictions are laid out over.
        ground_truths: defect annotations for one image.
        iou_threshold: overlap above which a non-forced anchor is matched.

    Returns:
        MatchResult with one entry per anchor.
    """
    num_anchors = len(anchors)
    matched_gt = np.full(num_anchors, -1, dtype=np.int64)
    classes = np.zeros(num_anchors, dtype=np.int64)
    targets = np.zeros((num_anchors, 4), dtype=np.float64)

    if not ground_truths:
        return MatchResult(matched_gt, classes, targets, np.empty(0, dtype=np.int64))

    gt_centers = np.array(
        [[g.box.cx, g.box.cy, g.box.w, g.box.h] for g in ground_truths], dtype=np.float64
    )
    overlap = iou_matrix(center_to_corner(gt_centers), anchors.corners())

    claim_of = _forced_claims(overlap)
    for g, a in enumerate(claim_of):
        if a >= 0:
            matched_gt[a] = g

    # threshold phase: unclaimed anchors with enough overlap take their argmax gt
    best_gt = overlap.argmax(axis=0)
    best_overlap = overlap.max(axis=0)
    eligible = (matched_gt < 0) & (best_overlap > iou_threshold)
    matched_gt[eligible] = best_gt[eligible]

    fg = np.flatnonzero(matched_gt >= 0)
    if fg.size:
        gt_of_fg = matched_gt[fg]
        classes[fg] = np.array([ground_truths[g].class_id for g in gt_of_fg])
        targets[fg] = encode_boxes(gt_centers[gt_of_fg], anchors.boxes[fg])

    return MatchResult(matched_gt, classes, targets, claim_of)
