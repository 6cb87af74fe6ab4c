"""Recall-at-bandwidth metrics and reconstruction-error statistics.

A ground-truth box counts as detected when at least half of its area is
covered by the union of the transmitted regions (the default), or, with
``overlap_mode="iou"``, when some single region reaches 0.5 IoU with it.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import BoundingBox, ErrorFrame, RegionSet, ValidationError
from .postprocess import CellScores, merge_regions, select_regions

CANONICAL_BUDGETS = tuple(round(0.05 + 0.1 * i, 2) for i in range(10))

OVERLAP_MODES = ("coverage", "iou")


@dataclass(frozen=True)
class GroundTruth:
    """Frame index -> annotated boxes (scores unused)."""

    boxes: Mapping[int, tuple[BoundingBox, ...]]

    def __post_init__(self):
        object.__setattr__(
            self, "boxes", {int(k): tuple(v) for k, v in self.boxes.items()}
        )

    def total_boxes(self) -> int:
        return sum(len(v) for v in self.boxes.values())


@dataclass
class EvalReport:
    recalls: dict[float, float]
    ar: Optional[float] = None
    err_b: Optional[float] = None
    err_r: Optional[float] = None
    delta_r: Optional[float] = None
    mean_boxes: Optional[float] = None

    def to_json(self) -> str:
        payload = {
            "recalls": [{"p": p, "recall": r} for p, r in sorted(self.recalls.items())],
            "ar": self.ar,
            "err_b": self.err_b,
            "err_r": self.err_r,
            "delta_r": self.delta_r,
            "mean_boxes": self.mean_boxes,
        }
        return json.dumps(payload)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["p", "recall"])
        for p, r in sorted(self.recalls.items()):
            writer.writerow([p, r])
        if self.ar is not None:
            writer.writerow(["ar", self.ar])
        return buf.getvalue()


def _intersect(a: BoundingBox, b: BoundingBox) -> int:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return w * h if w > 0 and h > 0 else 0


def union_area_within(gt: BoundingBox, boxes: Sequence[BoundingBox]) -> int:
    """Exact pixel area of gt covered by the union of boxes.

    Coordinate compression: clip every box to gt, cut gt into the rectangle
    grid induced by all clipped edges, and count grid rectangles covered by
    any box. Exact for integer coordinates, no rasterization needed.
    """
    clipped = []
    for b in boxes:
        x0, y0 = max(b.x_min, gt.x_min), max(b.y_min, gt.y_min)
        x1, y1 = min(b.x_max, gt.x_max), min(b.y_max, gt.y_max)
        if x0 < x1 and y0 < y1:
            clipped.append((x0, y0, x1, y1))
    if not clipped:
        return 0
    xs = np.unique([v for box in clipped for v in (box[0], box[2])])
    ys = np.unique([v for box in clipped for v in (box[1], box[3])])
    covered = np.zeros((len(ys) - 1, len(xs) - 1), dtype=bool)
    for x0, y0, x1, y1 in clipped:
        ix0, ix1 = np.searchsorted(xs, (x0, x1))
        iy0, iy1 = np.searchsorted(ys, (y0, y1))
        covered[iy0:iy1, ix0:ix1] = True
    cell_areas = np.outer(np.diff(ys), np.diff(xs))
    return int(cell_areas[covered].sum())


def coverage(gt: BoundingBox, regions: RegionSet) -> float:
    """Fraction of the ground-truth box covered by the union of the regions."""
    return union_area_within(gt, regions.regions) / gt.area()


def _iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = _intersect(a, b)
    return inter / (a.area() + b.area() - inter) if inter else 0.0


def box_detected(
    gt: BoundingBox,
    regions: RegionSet,
    min_overlap: float = 0.5,
    overlap_mode: str = "coverage",
) -> bool:
    if overlap_mode == "coverage":
        return coverage(gt, regions) >= min_overlap
    if overlap_mode == "iou":
        return any(_iou(gt, r) >= min_overlap for r in regions.regions)
    raise ValidationError(f"unknown overlap mode {overlap_mode!r}")


def recall_at_p(
    predictions: Iterable[RegionSet],
    gt: GroundTruth,
    min_overlap: float = 0.5,
    overlap_mode: str = "coverage",
    max_area: Optional[int] = None,
) -> float:
    """Fraction of ground-truth boxes detected across all frames.

    Frames without ground truth contribute nothing. Every annotated frame
    must have a prediction record (possibly with zero regions). With
    ``max_area`` set, any frame whose regions together exceed it is
    rejected as a budget violation.
    """
    by_frame: dict[int, RegionSet] = {}
    for rs in predictions:
        if rs.frame_index in by_frame:
            raise ValidationError(f"duplicate predictions for frame {rs.frame_index}")
        if max_area is not None and rs.total_area() > max_area:
            raise ValidationError(
                f"frame {rs.frame_index}: region area {rs.total_area()} exceeds "
                f"budget {max_area}"
            )
        by_frame[rs.frame_index] = rs
    hits = 0
    total = 0
    for frame_index, boxes in gt.boxes.items():
        if not boxes:
            continue
        if frame_index not in by_frame:
            raise ValidationError(f"no predictions for annotated frame {frame_index}")
        rs = by_frame[frame_index]
        total += len(boxes)
        for b in boxes:
            if box_detected(b, rs, min_overlap, overlap_mode):
                hits += 1
    return hits / total if total else 0.0


def average_recall(recalls: Mapping[float, float]) -> float:
    """Mean recall over the ten canonical budgets 0.05, 0.15, ..., 0.95."""
    keyed = {round(p, 2): r for p, r in recalls.items()}
    missing = [p for p in CANONICAL_BUDGETS if p not in keyed]
    if missing:
        raise ValidationError(f"missing recall values for budgets {missing}")
    return float(np.mean([keyed[p] for p in CANONICAL_BUDGETS]))


def recon_error_stats(
    err: ErrorFrame, gt_boxes: Sequence[BoundingBox]
) -> tuple[Optional[float], float, Optional[float]]:
    """Mean error inside the ground-truth boxes, outside them, and the gap.

    Returns ``(err_b, err_r, delta_r)``; ``err_b`` and ``delta_r`` are None
    when there are no boxes.
    """
    inbox = np.zeros((err.height, err.width), dtype=bool)
    for b in gt_boxes:
        inbox[max(0, b.y_min) : b.y_max, max(0, b.x_min) : b.x_max] = True
    pixel_err = err.data.mean(axis=2)
    err_r = float(pixel_err[~inbox].mean()) if (~inbox).any() else 0.0
    if not inbox.any():
        return None, err_r, None
    err_b = float(pixel_err[inbox].mean())
    return err_b, err_r, err_b - err_r


class ReconErrorAccumulator:
    """Pixel-weighted aggregation of in-box / out-of-box error over frames."""

    def __init__(self):
        self.sum_in = 0.0
        self.n_in = 0
        self.sum_out = 0.0
        self.n_out = 0

    def add(self, err: ErrorFrame, gt_boxes: Sequence[BoundingBox]) -> None:
        inbox = np.zeros((err.height, err.width), dtype=bool)
        for b in gt_boxes:
            inbox[max(0, b.y_min) : b.y_max, max(0, b.x_min) : b.x_max] = True
        pixel_err = err.data.mean(axis=2)
        self.sum_in += float(pixel_err[inbox].sum())
        self.n_in += int(inbox.sum())
        self.sum_out += float(pixel_err[~inbox].sum())
        self.n_out += int((~inbox).sum())

    def stats(self) -> tuple[Optional[float], float, Optional[float]]:
        err_r = self.sum_out / self.n_out if self.n_out else 0.0
        if not self.n_in:
            return None, err_r, None
        err_b = self.sum_in / self.n_in
        return err_b, err_r, err_b - err_r


def area_recall_curve(
    frame_scores: Sequence[tuple[int, CellScores]],
    gt: GroundTruth,
    budgets: Sequence[float] = CANONICAL_BUDGETS,
    merge: bool = False,
    min_overlap: float = 0.5,
    overlap_mode: str = "coverage",
) -> EvalReport:
    """Recall per budget from per-frame cell scores computed once.

    Cell scores do not depend on the budget, so each budget only re-runs
    the (cheap) selection stage. ``ar`` is filled in when the budgets are
    exactly the ten canonical ones.
    """
    recalls = {}
    for p in budgets:
        preds = []
        for frame_index, scores in frame_scores:
            rs = select_regions(scores, p, frame_index=frame_index)
            if merge and rs.regions:
                rs = merge_regions(rs, scores, p)
            preds.append(rs)
        recalls[round(p, 2)] = recall_at_p(
            preds, gt, min_overlap=min_overlap, overlap_mode=overlap_mode
        )
    ar = None
    if sorted(recalls) == sorted(CANONICAL_BUDGETS):
        ar = average_recall(recalls)
    return EvalReport(recalls=recalls, ar=ar)
