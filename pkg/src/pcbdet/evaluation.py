"""Detection evaluation: AP per class, mAP, fixed-threshold F-measure.

A detection counts as a true positive when its overlap with an unmatched
ground truth of the same class strictly exceeds the overlap threshold
(0.33 by default; defects are small, so the usual 0.5 is needlessly
harsh). Matching is greedy in descending score order and each ground
truth can be claimed once.

Average precision integrates the full precision/recall curve using the
precision envelope (every detection is a recall point, precision at each
recall is the maximum achieved at that recall or beyond). Classes with
no ground truths are reported as None and excluded from the mean.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Annotation
from .geometry import Box, NUM_DEFECT_CLASSES, ScoredBox, center_to_corner, iou_matrix

EVAL_IOU_THRESHOLD = 0.33
F_SCORE_THRESHOLD = 0.5

DetectionsByImage = Mapping[str, Sequence[ScoredBox]]
TruthsByImage = Mapping[str, Sequence[Annotation]]


def match_detections(
    detections: Sequence[ScoredBox],
    truths: Sequence[Annotation],
    class_id: int,
    iou_threshold: float = EVAL_IOU_THRESHOLD,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedily match one image's detections of one class to its truths.

    Returns:
        (scores, is_tp): parallel arrays over this class's detections in
        descending score order (ties keep input order). A detection is a
        true positive when some not-yet-claimed ground truth of the same
        class overlaps it by strictly more than ``iou_threshold``.
    """
    dets = [d for d in detections if d.class_id == class_id]
    gts = [t for t in truths if t.class_id == class_id]
    if not dets:
        return np.empty(0), np.empty(0, dtype=bool)

    order = np.argsort(-np.array([d.score for d in dets]), kind="stable")
    scores = np.array([dets[i].score for i in order])
    is_tp = np.zeros(len(dets), dtype=bool)
    if gts:
        det_corners = center_to_corner(
            np.array([[dets[i].box.cx, dets[i].box.cy, dets[i].box.w, dets[i].box.h] for i in order])
        )
        gt_corners = center_to_corner(
            np.array([[t.box.cx, t.box.cy, t.box.w, t.box.h] for t in gts])
        )
        overlap = iou_matrix(det_corners, gt_corners)
        claimed = np.zeros(len(gts), dtype=bool)
        for k in range(len(dets)):
            row = np.where(claimed, -1.0, overlap[k])
            g = int(np.argmax(row))
            if row[g] > iou_threshold:
                claimed[g] = True
                is_tp[k] = True
    return scores, is_tp


def average_precision(scores: np.ndarray, is_tp: np.ndarray, num_gt: int) -> float | None:
    """Precision-envelope AP from pooled detections of one class.

    Args:
        scores: detection scores (any order).
        is_tp: parallel true-positive flags.
        num_gt: ground-truth count for the class; None is returned when
            it is zero (the class cannot be scored).
    """
    if num_gt == 0:
        return None
    if scores.size == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.cumsum(np.asarray(is_tp, dtype=np.float64)[order])
    fp = np.cumsum(~np.asarray(is_tp, dtype=bool)[order])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def _pooled_class_matches(
    detections: DetectionsByImage,
    truths: TruthsByImage,
    class_id: int,
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    all_scores = []
    all_tp = []
    num_gt = 0
    for image_id in sorted(set(detections) | set(truths)):
        dets = detections.get(image_id, ())
        gts = truths.get(image_id, ())
        num_gt += sum(1 for t in gts if t.class_id == class_id)
        scores, is_tp = match_detections(dets, gts, class_id, iou_threshold)
        all_scores.append(scores)
        all_tp.append(is_tp)
    return (
        np.concatenate(all_scores) if all_scores else np.empty(0),
        np.concatenate(all_tp) if all_tp else np.empty(0, dtype=bool),
        num_gt,
    )


def precision_recall_f(
    detections: DetectionsByImage,
    truths: TruthsByImage,
    score_threshold: float = F_SCORE_THRESHOLD,
    iou_threshold: float = EVAL_IOU_THRESHOLD,
) -> tuple[float, float, float]:
    """Micro-averaged precision/recall/F over all classes at one threshold.

    Only detections scoring at least ``score_threshold`` participate.
    With no surviving detections precision is 0 by convention, as is F
    when either component is 0.
    """
    kept = {
        image_id: [d for d in dets if d.score >= score_threshold]
        for image_id, dets in detections.items()
    }
    tp = 0
    num_det = 0
    num_gt = 0
    for class_id in range(1, NUM_DEFECT_CLASSES + 1):
        scores, is_tp, class_gt = _pooled_class_matches(kept, truths, class_id, iou_threshold)
        tp += int(is_tp.sum())
        num_det += int(scores.size)
        num_gt += class_gt
    precision = tp / num_det if num_det else 0.0
    recall = tp / num_gt if num_gt else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f


@dataclass(frozen=True)
class EvalReport:
    """Evaluation summary; per_class_ap holds None for unscoreable classes."""

    per_class_ap: dict[int, float | None]
    mean_ap: float
    precision: float
    recall: float
    f_measure: float
    num_images: int
    num_ground_truths: int
    num_detections: int
    iou_threshold: float
    score_threshold: float

    def as_text(self) -> str:
        from .data import CLASS_NAMES

        lines = [
            f"images {self.num_images}  ground truths {self.num_ground_truths}  "
            f"detections {self.num_detections}",
            f"overlap threshold {self.iou_threshold:g}",
        ]
        for class_id in sorted(self.per_class_ap):
            ap = self.per_class_ap[class_id]
            shown = "  (no ground truths)" if ap is None else f"{ap:.4f}"
            lines.append(f"  AP {CLASS_NAMES[class_id]:<16}{shown}")
        lines.append(f"mAP {self.mean_ap:.4f}")
        lines.append(
            f"at score >= {self.score_threshold:g}: precision {self.precision:.4f}  "
            f"recall {self.recall:.4f}  F {self.f_measure:.4f}"
        )
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
                "mean_ap": self.mean_ap,
                "precision": self.precision,
                "recall": self.recall,
                "f_measure": self.f_measure,
                "num_images": self.num_images,
                "num_ground_truths": self.num_ground_truths,
                "num_detections": self.num_detections,
                "iou_threshold": self.iou_threshold,
                "score_threshold": self.score_threshold,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        payload["per_class_ap"] = {int(k): v for k, v in payload["per_class_ap"].items()}
        return cls(**payload)


def evaluate(
    detections: DetectionsByImage,
    truths: TruthsByImage,
    iou_threshold: float = EVAL_IOU_THRESHOLD,
    score_threshold: float = F_SCORE_THRESHOLD,
) -> EvalReport:
    """Score detections against ground truths over a whole split."""
    per_class_ap: dict[int, float | None] = {}
    for class_id in range(1, NUM_DEFECT_CLASSES + 1):
        scores, is_tp, num_gt = _pooled_class_matches(detections, truths, class_id, iou_threshold)
        per_class_ap[class_id] = average_precision(scores, is_tp, num_gt)
    scored = [ap for ap in per_class_ap.values() if ap is not None]
    precision, recall, f = precision_recall_f(detections, truths, score_threshold, iou_threshold)
    return EvalReport(
        per_class_ap=per_class_ap,
        mean_ap=float(np.mean(scored)) if scored else 0.0,
        precision=precision,
        recall=recall,
        f_measure=f,
        num_images=len(set(detections) | set(truths)),
        num_ground_truths=sum(len(v) for v in truths.values()),
        num_detections=sum(len(v) for v in detections.values()),
        iou_threshold=iou_threshold,
        score_threshold=score_threshold,
    )


def write_detections(path: str | Path, detections: DetectionsByImage) -> None:
    """One detection per line: image id, class, score, normalized cx cy w h.

    The box is stored in its native center form and floats are written
    with shortest round-trip precision, so reading the file back
    reproduces the in-memory detections bit for bit.
    """
    lines = []
    for image_id in sorted(detections):
        for d in detections[image_id]:
            # plain floats repr to shortest round-trip form; numpy scalars do not
            values = (d.score, d.box.cx, d.box.cy, d.box.w, d.box.h)
            score, cx, cy, w, h = (repr(float(v)) for v in values)
            lines.append(f"{image_id} {d.class_id} {score} {cx} {cy} {w} {h}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_detections(path: str | Path) -> dict[str, list[ScoredBox]]:
    """Parse the :func:`write_detections` format."""
    detections: dict[str, list[ScoredBox]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(fields)}")
        image_id, class_id = fields[0], int(fields[1])
        score, cx, cy, w, h = (float(f) for f in fields[2:])
        detections.setdefault(image_id, []).append(
            ScoredBox(box=Box(cx, cy, w, h), score=score, class_id=class_id)
        )
    return detections


@dataclass(frozen=True)
class BenchmarkResult:
    fps: float
    p50_ms: float
    p95_ms: float
    iterations: int

    def as_text(self) -> str:
        return (
            f"{self.fps:.2f} pairs/s over {self.iterations} runs  "
            f"(p50 {self.p50_ms:.1f} ms, p95 {self.p95_ms:.1f} ms)"
        )


def fps_benchmark(run_once, iterations: int = 30, warmup: int = 5) -> BenchmarkResult:
    """Time a no-argument callable: warmup runs, then timed runs.

    Throughput is iterations divided by total timed wall time; latency
    percentiles come from the individual run times.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    for _ in range(warmup):
        run_once()
    latencies = []
    for _ in range(iterations):
        start = time.perf_counter()
        run_once()
        latencies.append(time.perf_counter() - start)
    total = sum(latencies)
    lat = np.array(latencies)
    return BenchmarkResult(
        fps=iterations / total,
        p50_ms=float(np.percentile(lat, 50) * 1e3),
        p95_ms=float(np.percentile(lat, 95) * 1e3),
        iterations=iterations,
    )
