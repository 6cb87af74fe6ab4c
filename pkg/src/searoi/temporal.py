"""Frame ring buffer, error-frame computation, and error momentum."""

from __future__ import annotations

from typing import Generic, TypeVar, Union

import numpy as np

from .core import ErrorFrame, Frame, ValidationError, make_error_frame

_T = TypeVar("_T", Frame, ErrorFrame)


class Ring(Generic[_T]):
    """Fixed-capacity FIFO of frames, newest last.

    Single-owner: the pipeline thread pushes, downstream stages only ever
    see immutable snapshots via :meth:`items`.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValidationError(f"ring capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: list[_T] = []

    def __len__(self) -> int:
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) == self.capacity

    def items(self) -> tuple[_T, ...]:
        return tuple(self._items)

    def push(self, item: _T) -> "Ring[_T]":
        if self._items:
            head = self._items[-1]
            if (item.width, item.height, item.channels) != (
                head.width,
                head.height,
                head.channels,
            ):
                raise ValidationError(
                    f"ring item dims {item.width}x{item.height}x{item.channels} "
                    f"do not match {head.width}x{head.height}x{head.channels}"
                )
        self._items.append(item)
        if len(self._items) > self.capacity:
            self._items.pop(0)
        return self


FrameRing = Ring[Frame]
ErrorRing = Ring[ErrorFrame]


def error_frame(pred: Frame, actual: Frame) -> ErrorFrame:
    """Per-pixel, per-channel absolute difference between two frames."""
    if pred.data.shape != actual.data.shape:
        raise ValidationError(
            f"dimension mismatch: {pred.data.shape} vs {actual.data.shape}"
        )
    return make_error_frame(
        np.abs(pred.data.astype(np.float64) - actual.data.astype(np.float64)),
        source_frame_index=actual.index,
    )


def momentum_average(ring: ErrorRing) -> ErrorFrame:
    """Element-wise mean of the most recent error frames in the ring.

    The current (last-pushed) frame is included. Until the ring has filled,
    the mean runs over whatever is present, so output is available from the
    first frame on.
    """
    items = ring.items()
    if not items:
        raise ValidationError("momentum average of an empty ring")
    acc = np.zeros_like(items[0].data, dtype=np.float64)
    for it in items:
        acc += it.data
    acc /= len(items)
    return make_error_frame(acc, source_frame_index=items[-1].source_frame_index)
