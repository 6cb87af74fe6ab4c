"""Shared domain types and pixel conventions.

Conventions used throughout the package:

* Pixel values are normalized floats in ``[0, 1]``.
* The coordinate origin is the top-left corner; x grows rightward,
  y grows downward.
* Boxes are half-open pixel intervals ``[x_min, x_max) x [y_min, y_max)``
  so that box areas tile exactly under a grid partition.

All types here are value objects: once constructed they are never mutated,
which makes them safe to hand to concurrent workers. Array payloads are
marked read-only on construction (the constructor takes ownership of the
array it is given).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ValidationError(ValueError):
    """A domain object violates one of its invariants."""


@dataclass(frozen=True)
class Telemetry:
    """Per-frame UAV sensor readings needed for horizon geometry.

    ``gimbal_pitch_deg`` is zero for a level camera and positive when the
    camera tilts up from horizontal. ``focal_px`` is the focal length
    expressed in pixels.
    """

    altitude_m: float
    gimbal_pitch_deg: float
    roll_deg: float
    focal_px: float

    def __post_init__(self):
        if self.altitude_m < 0:
            raise ValidationError(f"altitude must be >= 0 m, got {self.altitude_m}")
        if self.focal_px <= 0:
            raise ValidationError(f"focal length must be > 0 px, got {self.focal_px}")


@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB video frame with normalized channel values.

    ``data`` has shape ``(height, width, channels)`` and row-major layout.
    """

    width: int
    height: int
    channels: int
    data: np.ndarray
    index: int = 0
    telemetry: Optional[Telemetry] = None

    def __post_init__(self):
        self.data.setflags(write=False)


@dataclass(frozen=True, eq=False)
class ErrorFrame:
    """Per-pixel nonnegative reconstruction-error map for one frame."""

    width: int
    height: int
    channels: int
    data: np.ndarray
    source_frame_index: int = 0

    def __post_init__(self):
        self.data.setflags(write=False)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel rectangle, half-open on both axes."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    score: Optional[float] = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(
                f"degenerate box ({self.x_min},{self.y_min},{self.x_max},{self.y_max})"
            )
        if self.score is not None and self.score < 0:
            raise ValidationError(f"box score must be >= 0, got {self.score}")

    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def clamped(self, width: int, height: int) -> "BoundingBox":
        """Clip to frame bounds; raises if nothing remains."""
        x0 = max(0, min(self.x_min, width))
        y0 = max(0, min(self.y_min, height))
        x1 = max(0, min(self.x_max, width))
        y1 = max(0, min(self.y_max, height))
        if x0 >= x1 or y0 >= y1:
            raise ValidationError(
                f"box ({self.x_min},{self.y_min},{self.x_max},{self.y_max}) "
                f"lies outside a {width}x{height} frame"
            )
        return BoundingBox(x0, y0, x1, y1, self.score)


@dataclass(frozen=True)
class RegionSet:
    """Per-frame list of proposal boxes produced under an area budget."""

    frame_index: int
    regions: tuple[BoundingBox, ...]
    budget_p: float

    def __post_init__(self):
        if not 0 < self.budget_p <= 1:
            raise ValidationError(f"budget_p must be in (0, 1], got {self.budget_p}")
        object.__setattr__(self, "regions", tuple(self.regions))

    def total_area(self) -> int:
        return sum(b.area() for b in self.regions)


@dataclass(frozen=True)
class GridSpec:
    """Pooling grid: ``cols`` cells across, ``rows`` cells down."""

    cols: int
    rows: int

    def __post_init__(self):
        if self.cols < 1 or self.rows < 1:
            raise ValidationError(f"grid must be at least 1x1, got {self.cols}x{self.rows}")

    @property
    def cell_count(self) -> int:
        return self.cols * self.rows


def make_frame(
    data: np.ndarray, index: int = 0, telemetry: Optional[Telemetry] = None
) -> Frame:
    """Build a Frame from an ``(H, W, C)`` array, deriving the dimensions."""
    if data.ndim != 3:
        raise ValidationError(f"frame data must be (H, W, C), got shape {data.shape}")
    h, w, c = data.shape
    return Frame(width=w, height=h, channels=c, data=data, index=index, telemetry=telemetry)


def make_error_frame(data: np.ndarray, source_frame_index: int = 0) -> ErrorFrame:
    if data.ndim != 3:
        raise ValidationError(f"error data must be (H, W, C), got shape {data.shape}")
    h, w, c = data.shape
    return ErrorFrame(
        width=w, height=h, channels=c, data=data, source_frame_index=source_frame_index
    )


def validate_frame(frame: Frame) -> None:
    """Check every Frame invariant; raises ValidationError on the first violation.

    Out-of-range pixel reports include the flat (row-major) index of the
    first offending value.
    """
    expected = (frame.height, frame.width, frame.channels)
    if frame.data.shape != expected:
        raise ValidationError(
            f"dimension mismatch: data shape {frame.data.shape}, "
            f"declared (h, w, c) = {expected}"
        )
    if frame.data.size != frame.width * frame.height * frame.channels:
        raise ValidationError(
            f"dimension mismatch: {frame.data.size} values for "
            f"{frame.width}x{frame.height}x{frame.channels}"
        )
    if frame.index < 0:
        raise ValidationError(f"frame index must be >= 0, got {frame.index}")
    flat = frame.data.reshape(-1)
    bad = np.flatnonzero((flat < 0.0) | (flat > 1.0))
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"pixel value out of range [0, 1] at flat index {i}: {flat[i]}")


def validate_error_frame(err: ErrorFrame) -> None:
    expected = (err.height, err.width, err.channels)
    if err.data.shape != expected:
        raise ValidationError(
            f"dimension mismatch: data shape {err.data.shape}, declared {expected}"
        )
    flat = err.data.reshape(-1)
    bad = np.flatnonzero(flat < 0.0)
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"negative error value at flat index {i}: {flat[i]}")


def box_area(box: BoundingBox) -> int:
    """Pixel area of a half-open box."""
    return box.area()


def cells_for_budget(budget_p: float, cell_count: int) -> int:
    """Number of grid cells a fractional area budget buys (ceiling rule).

    Rounds the product to 9 decimals first so that float noise cannot push
    an exact integer over the ceiling boundary.
    """
    if not 0 < budget_p <= 1:
        raise ValidationError(f"budget_p must be in (0, 1], got {budget_p}")
    return min(cell_count, math.ceil(round(budget_p * cell_count, 9)))
