"""Streaming per-frame pipeline: method error frame -> momentum -> noise
removal -> horizon mask -> grid scores -> budgeted regions."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from . import autoencoder as ae
from . import baselines
from .core import (
    ErrorFrame,
    Frame,
    GridSpec,
    RegionSet,
    ValidationError,
    make_error_frame,
    make_frame,
)
from .postprocess import (
    CellScores,
    apply_horizon_mask,
    grid_pool,
    horizon_keep_mask,
    horizon_line,
    local_noise_remover,
    merge_regions,
    select_regions,
)
from .temporal import Ring, error_frame, momentum_average

METHODS = ("auto", "mf", "fd", "gmm")


@dataclass
class PipelineConfig:
    """Operating point of the proposal pipeline.

    The defaults are the recommended configuration: a 48x27 grid, the fifth
    frame predicted from the past four, an error momentum window of two,
    three noise-remover iterations, and a 5% area budget.
    """

    method: str = "auto"
    model_path: Optional[str] = None
    grid: GridSpec = field(default_factory=lambda: GridSpec(48, 27))
    budget_p: float = 0.05
    momentum: int = 2
    lnr_iterations: int = 3
    horizon: bool = True
    merge: bool = False
    overlap_mode: str = "coverage"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.momentum < 1:
            raise ValidationError(f"momentum window must be >= 1, got {self.momentum}")
        if self.lnr_iterations < 0:
            raise ValidationError(f"lnr iterations must be >= 0, got {self.lnr_iterations}")


@dataclass
class FrameResult:
    frame_index: int
    regions: Optional[RegionSet]
    scores: Optional[CellScores]
    raw_error: Optional[ErrorFrame]
    timings_ms: dict[str, float]

    @property
    def total_ms(self) -> float:
        return self.timings_ms.get("total", 0.0)


class RoiPipeline:
    """Consumes frames in order and emits one RegionSet per scoreable frame.

    Warm-up frames (before the predictor has enough history) yield a
    FrameResult with ``regions=None``. Deterministic: the same frames and
    configuration always produce the same regions.
    """

    def __init__(self, config: PipelineConfig, model: Optional[ae.Model] = None):
        self.config = config
        if config.method == "auto":
            if model is None:
                raise ValidationError("method 'auto' needs a model")
            self.model = model
            self._frame_ring: Ring = Ring(model.config.n_input_frames)
        else:
            self.model = None
            self._frame_ring = None
        self._error_ring: Ring = Ring(config.momentum)
        self._mf_state = baselines.MeanFilterState()
        self._gmm_state = baselines.GmmPixelState()
        self._prev_frame: Optional[Frame] = None

    # -- method-specific raw error frame ------------------------------------

    def _model_frame(self, frame: Frame) -> Frame:
        """Replicate-pad the frame up to the model's input size if needed."""
        cfg = self.model.config
        if (frame.width, frame.height) == (cfg.input_width, cfg.input_height):
            return frame
        if frame.width > cfg.input_width or frame.height > cfg.input_height:
            raise ValidationError(
                f"frame {frame.width}x{frame.height} larger than model input "
                f"{cfg.input_width}x{cfg.input_height}"
            )
        padded = ae.pad_to_multiple(
            np.asarray(frame.data), cfg.stride**cfg.num_layers
        )
        if padded.shape[:2] != (cfg.input_height, cfg.input_width):
            raise ValidationError(
                f"frame {frame.width}x{frame.height} does not pad to model input "
                f"{cfg.input_width}x{cfg.input_height}"
            )
        return make_frame(padded, index=frame.index, telemetry=frame.telemetry)

    def _step_error(self, frame: Frame) -> Optional[ErrorFrame]:
        method = self.config.method
        if method == "auto":
            padded = self._model_frame(frame)
            err = None
            if self._frame_ring.full:
                pred = ae.forward(self.model, list(self._frame_ring.items()))
                err_full = error_frame(pred, padded)
                if (frame.height, frame.width) != err_full.data.shape[:2]:
                    # crop the prediction error back to the real frame size
                    err = make_error_frame(
                        np.asarray(err_full.data[: frame.height, : frame.width]),
                        source_frame_index=frame.index,
                    )
                else:
                    err = err_full
            self._frame_ring.push(padded)
            return err
        if method == "mf":
            _, err = baselines.mean_filter_step(self._mf_state, frame)
            return err
        if method == "gmm":
            _, err = baselines.gmm_step(self._gmm_state, frame)
            return err
        # fd
        prev = self._prev_frame
        self._prev_frame = frame
        if prev is None:
            return None
        return baselines.frame_differencing_step(prev, frame)

    # -- full per-frame step --------------------------------------------------

    def process(self, frame: Frame, want_scores: bool = False) -> FrameResult:
        timings: dict[str, float] = {}
        t0 = time.perf_counter()
        raw = self._step_error(frame)
        timings["model"] = (time.perf_counter() - t0) * 1e3
        if raw is None:
            timings["total"] = timings["model"]
            return FrameResult(frame.index, None, None, None, timings)

        keep = None
        if self.config.horizon and frame.telemetry is not None:
            line = horizon_line(frame.telemetry, frame.width, frame.height)
            raw = apply_horizon_mask(raw, line)
            keep = horizon_keep_mask(line, frame.width, frame.height)

        t1 = time.perf_counter()
        self._error_ring.push(raw)
        smoothed = momentum_average(self._error_ring)
        t2 = time.perf_counter()
        cleaned = (
            local_noise_remover(smoothed, self.config.lnr_iterations)
            if self.config.lnr_iterations
            else smoothed
        )
        t3 = time.perf_counter()
        scores = grid_pool(cleaned, self.config.grid, keep_mask=keep)
        t4 = time.perf_counter()
        regions = select_regions(scores, self.config.budget_p, frame_index=frame.index)
        if self.config.merge and regions.regions:
            regions = merge_regions(regions, scores, self.config.budget_p)
        t5 = time.perf_counter()
        timings["momentum"] = (t2 - t1) * 1e3
        timings["lnr"] = (t3 - t2) * 1e3
        timings["grid"] = (t4 - t3) * 1e3
        timings["select"] = (t5 - t4) * 1e3
        timings["total"] = (t5 - t0) * 1e3
        return FrameResult(
            frame_index=frame.index,
            regions=regions,
            scores=scores if want_scores else None,
            raw_error=raw,
            timings_ms=timings,
        )

    def run(self, frames: Iterable[Frame], want_scores: bool = False) -> Iterator[FrameResult]:
        for frame in frames:
            yield self.process(frame, want_scores=want_scores)


def score_sequence(
    config: PipelineConfig, frames: Iterable[Frame], model: Optional[ae.Model] = None
) -> list[tuple[int, CellScores]]:
    """Per-frame cell scores for budget-sweep evaluation (selection not run)."""
    pipe = RoiPipeline(config, model=model)
    out = []
    for result in pipe.run(frames, want_scores=True):
        if result.scores is not None:
            out.append((result.frame_index, result.scores))
    return out
