"""Error-frame postprocessing: noise removal, horizon masking, grid scoring,
budgeted region selection, and border-following region merging.

Horizon conventions
-------------------
Offsets are signed pixels relative to the vertical image center. A positive
offset moves the horizon *up* in the image (toward row 0): the horizon row
at column x is ``height/2 - offset(x)``, and everything in rows above it
(smaller y) is sky. Pitch is positive when the camera tilts up from
horizontal, so a camera pitched well above the horizon yields a negative
center offset and a horizon low in the frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .core import (
    BoundingBox,
    ErrorFrame,
    Frame,
    GridSpec,
    RegionSet,
    Telemetry,
    ValidationError,
    cells_for_budget,
    make_error_frame,
)

# d = 3.57 * sqrt(h) gives the distance to the horizon in kilometers for an
# observer h meters above the surface; we need it in meters for the angle.
HORIZON_DISTANCE_M_PER_SQRT_M = 3570.0


@dataclass(frozen=True)
class HorizonLine:
    """Straight horizon estimate as signed offsets at the image edges.

    Offsets are truncated to ``[-height/2, height/2]``. ``valid`` is False
    when the untruncated line lies entirely above the frame top (then the
    truncated line masks nothing) or entirely below the frame bottom (then
    it masks everything).
    """

    offset_left: float
    offset_right: float
    valid: bool = True


def horizon_line(telemetry: Telemetry, frame_width: int, frame_height: int) -> HorizonLine:
    """Locate the horizon from altitude, gimbal pitch, roll, and focal length.

    The sea-level horizon sits ``asin(sqrt(h)/3570)`` radians above a level
    camera's optical axis at altitude ``h`` meters (continuously extended to
    0 at h = 0). Projecting the angular difference to the pitch through the
    focal length gives the center offset; roll tilts the line by
    ``tan(roll) * width/2`` up at the left edge and down at the right.
    """
    roll = math.radians(telemetry.roll_deg)
    if abs(telemetry.roll_deg) >= 90.0:
        raise ValidationError(f"degenerate roll angle {telemetry.roll_deg} deg")
    h = telemetry.altitude_m
    horizon_angle = 0.0 if h == 0 else math.asin(math.sqrt(h) / HORIZON_DISTANCE_M_PER_SQRT_M)
    pitch = math.radians(telemetry.gimbal_pitch_deg)
    delta = horizon_angle - pitch
    center_offset = math.tan(abs(delta)) * telemetry.focal_px * math.copysign(1.0, delta)
    if delta == 0.0:
        center_offset = 0.0
    roll_offset = math.tan(roll) * frame_width / 2.0
    left = center_offset + roll_offset
    right = center_offset - roll_offset
    half = frame_height / 2.0
    valid = not (min(left, right) > half or max(left, right) < -half)
    return HorizonLine(
        offset_left=float(np.clip(left, -half, half)),
        offset_right=float(np.clip(right, -half, half)),
        valid=valid,
    )


def horizon_keep_mask(line: HorizonLine, width: int, height: int) -> np.ndarray:
    """(H, W) bool mask, True at pixels on or below the horizon line."""
    half = height / 2.0
    x_centers = np.arange(width) + 0.5
    offsets = line.offset_left + (line.offset_right - line.offset_left) * x_centers / width
    boundary_rows = half - offsets
    rows = np.arange(height)[:, None]
    return rows >= boundary_rows[None, :]


@dataclass(frozen=True, eq=False)
class LossMaskedFrame:
    """A training frame plus the pixels still eligible for the loss."""

    frame: Frame
    keep: np.ndarray


def apply_horizon_mask(
    item: Union[ErrorFrame, Frame], line: HorizonLine
) -> Union[ErrorFrame, LossMaskedFrame]:
    """Suppress everything above the horizon.

    Error frames get their sky pixels zeroed. Training frames are returned
    untouched together with a keep-mask flagging the sky as excluded from
    the loss.
    """
    keep = horizon_keep_mask(line, item.width, item.height)
    if isinstance(item, ErrorFrame):
        return make_error_frame(
            item.data * keep[:, :, None], source_frame_index=item.source_frame_index
        )
    return LossMaskedFrame(frame=item, keep=keep)


def local_noise_remover(err: ErrorFrame, iterations: int = 3) -> ErrorFrame:
    """Iterated neighborhood product that annihilates isolated errors.

    Per channel, each pixel is replaced by the product of itself and its
    four vertical/horizontal neighbors, all read from the previous
    iteration (no in-place sweep order dependence). Borders replicate their
    edge neighbors. Contiguous error blobs survive as small positive
    values, isolated speckles collapse to zero.
    """
    # float64: iterated products of values < 1 underflow float32 quickly
    data = err.data.astype(np.float64)
    for _ in range(iterations):
        padded = np.pad(data, ((1, 1), (1, 1), (0, 0)), mode="edge")
        data = (
            data
            * padded[:-2, 1:-1]
            * padded[2:, 1:-1]
            * padded[1:-1, :-2]
            * padded[1:-1, 2:]
        )
    return make_error_frame(data, source_frame_index=err.source_frame_index)


@dataclass(frozen=True, eq=False)
class CellScores:
    """Mean error per grid cell.

    Cells partition the frame; the base cell size is ``floor(dim / cells)``
    and the last row/column absorb any remainder pixels. ``masked`` flags
    cells whose every pixel is excluded (e.g. fully above the horizon);
    those carry score exactly 0 and are never selected.
    """

    grid: GridSpec
    scores: np.ndarray
    cell_width: int
    cell_height: int
    frame_width: int
    frame_height: int
    masked: np.ndarray

    def cell_box(self, row: int, col: int, score: Optional[float] = None) -> BoundingBox:
        x0 = col * self.cell_width
        y0 = row * self.cell_height
        x1 = (col + 1) * self.cell_width if col + 1 < self.grid.cols else self.frame_width
        y1 = (row + 1) * self.cell_height if row + 1 < self.grid.rows else self.frame_height
        return BoundingBox(x0, y0, x1, y1, score)

    def span_box(self, row0: int, col0: int, row1: int, col1: int, score=None) -> BoundingBox:
        """Pixel rectangle covering the inclusive cell range."""
        a = self.cell_box(row0, col0)
        b = self.cell_box(row1, col1)
        return BoundingBox(a.x_min, a.y_min, b.x_max, b.y_max, score)

    @property
    def base_cell_area(self) -> int:
        return self.cell_width * self.cell_height


def grid_pool(
    err: ErrorFrame, grid: GridSpec, keep_mask: Optional[np.ndarray] = None
) -> CellScores:
    """Score each grid cell by the mean channel-mean error of its pixels."""
    if grid.cols > err.width or grid.rows > err.height:
        raise ValidationError(
            f"grid {grid.cols}x{grid.rows} larger than frame {err.width}x{err.height}"
        )
    scalar = err.data.mean(axis=2)
    col_starts = np.arange(grid.cols) * (err.width // grid.cols)
    row_starts = np.arange(grid.rows) * (err.height // grid.rows)
    sums = np.add.reduceat(np.add.reduceat(scalar, row_starts, axis=0), col_starts, axis=1)
    col_sizes = np.diff(np.append(col_starts, err.width))
    row_sizes = np.diff(np.append(row_starts, err.height))
    counts = row_sizes[:, None] * col_sizes[None, :]
    scores = sums / counts
    if keep_mask is not None:
        kept = np.add.reduceat(
            np.add.reduceat(keep_mask.astype(np.int64), row_starts, axis=0),
            col_starts,
            axis=1,
        )
        masked = kept == 0
        scores[masked] = 0.0
    else:
        masked = np.zeros_like(scores, dtype=bool)
    return CellScores(
        grid=grid,
        scores=scores,
        cell_width=err.width // grid.cols,
        cell_height=err.height // grid.rows,
        frame_width=err.width,
        frame_height=err.height,
        masked=masked,
    )


def select_regions(scores: CellScores, budget_p: float, frame_index: int = 0) -> RegionSet:
    """Pick the highest-scoring cells the area budget affords.

    The budget buys ``ceil(budget_p * cell_count)`` cells. Ties break in
    row-major cell order; masked cells are never selected.
    """
    grid = scores.grid
    k = cells_for_budget(budget_p, grid.cell_count)
    flat = scores.scores.reshape(-1)
    candidates = np.flatnonzero(~scores.masked.reshape(-1))
    # stable sort on (-score, row-major index)
    order = candidates[np.lexsort((candidates, -flat[candidates]))]
    chosen = order[:k]
    boxes = []
    for cell in chosen:
        r, c = divmod(int(cell), grid.cols)
        boxes.append(scores.cell_box(r, c, score=float(flat[cell])))
    return RegionSet(frame_index=frame_index, regions=tuple(boxes), budget_p=budget_p)


# ---------------------------------------------------------------------------
# connected components by contour tracing (border following)
# ---------------------------------------------------------------------------

# clockwise Moore neighborhood in image coordinates, starting east
_TRACE_DIRS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


def label_components(mask: np.ndarray) -> np.ndarray:
    """8-connected component labels found by border following.

    Raster-scans the mask. Every new component is discovered through its
    outer border, traced with a clockwise Moore-neighbor walk starting
    toward the upper right; inner (hole) borders are traced from the
    opposite corner so holes do not split a component; pixels between
    borders inherit the label of their left neighbor. Background cells a
    tracer passes over are marked so no border is traced twice.

    Returns an int array of the mask's shape: 0 for background, components
    numbered 1..n in raster order of first contact.
    """
    rows, cols = mask.shape
    padded = np.zeros((rows + 2, cols + 2), dtype=np.int8)
    padded[1:-1, 1:-1] = mask.astype(bool)
    labels = np.zeros_like(padded, dtype=np.int32)
    visited = np.zeros_like(padded, dtype=bool)
    next_label = 1

    def tracer(r: int, c: int, start_dir: int):
        """First foreground Moore neighbor clockwise from start_dir, or None."""
        for i in range(8):
            d = (start_dir + i) % 8
            dr, dc = _TRACE_DIRS[d]
            rr, cc = r + dr, c + dc
            if padded[rr, cc]:
                return rr, cc, d
            visited[rr, cc] = True
        return None

    def trace_border(r0: int, c0: int, start_dir: int, label: int) -> None:
        labels[r0, c0] = label
        first = tracer(r0, c0, start_dir)
        if first is None:  # isolated cell
            return
        r1, c1, d = first
        labels[r1, c1] = label
        r, c = r1, c1
        # closed once the walk re-enters the start cell and steps to the
        # second cell again; cap guards against a malformed walk
        for _ in range(8 * padded.size):
            nr, nc, nd = tracer(r, c, (d + 6) % 8)
            labels[nr, nc] = label
            if (r, c) == (r0, c0) and (nr, nc) == (r1, c1):
                return
            r, c, d = nr, nc, nd
        raise RuntimeError("border trace failed to close")

    for r in range(1, rows + 1):
        for c in range(1, cols + 1):
            if not padded[r, c]:
                continue
            if labels[r, c] == 0 and not padded[r - 1, c]:
                trace_border(r, c, 7, next_label)
                next_label += 1
            if not padded[r + 1, c] and not visited[r + 1, c]:
                if labels[r, c] == 0:
                    labels[r, c] = labels[r, c - 1]
                trace_border(r, c, 3, int(labels[r, c]))
            if labels[r, c] == 0:
                labels[r, c] = labels[r, c - 1]
    return labels[1:-1, 1:-1]


def merge_regions(selected: RegionSet, scores: CellScores, budget_p: float) -> RegionSet:
    """Fuse selected cells that touch (even at corners) into single boxes.

    Each 8-connected component of selected cells becomes one bounding box,
    ranked by the mean score of its member cells. When the fused boxes
    together exceed the cell budget's pixel area, the lowest-ranked boxes
    are dropped, but at least one box is always kept.
    """
    if not selected.regions:
        raise ValidationError("cannot merge an empty selection")
    grid = scores.grid
    mask = np.zeros((grid.rows, grid.cols), dtype=bool)
    for box in selected.regions:
        col = min(box.x_min // scores.cell_width, grid.cols - 1)
        row = min(box.y_min // scores.cell_height, grid.rows - 1)
        mask[row, col] = True
    labels = label_components(mask)
    budget_area = cells_for_budget(budget_p, grid.cell_count) * scores.base_cell_area
    comps = []
    for label in range(1, labels.max() + 1):
        member_rows, member_cols = np.nonzero(labels == label)
        mean_score = float(scores.scores[member_rows, member_cols].mean())
        box = scores.span_box(
            int(member_rows.min()),
            int(member_cols.min()),
            int(member_rows.max()),
            int(member_cols.max()),
            score=mean_score,
        )
        first_cell = int(member_rows[0] * grid.cols + member_cols[0])
        comps.append((mean_score, first_cell, box))
    comps.sort(key=lambda t: (-t[0], t[1]))
    boxes = [c[2] for c in comps]
    total = sum(b.area() for b in boxes)
    while len(boxes) > 1 and total > budget_area:
        total -= boxes.pop().area()
    return RegionSet(
        frame_index=selected.frame_index, regions=tuple(boxes), budget_p=budget_p
    )
