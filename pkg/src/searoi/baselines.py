"""Classical per-pixel background-subtraction error generators.

Each method consumes frames one at a time and emits an ErrorFrame with the
same spatial dimensions, so any of them can replace the autoencoder in
front of the grid / selection / merging / evaluation stages.

States are single-owner per stream: step functions update them in place
and return them for call-chaining convenience.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ErrorFrame, Frame, ValidationError, make_error_frame


@dataclass
class MeanFilterState:
    """Exponential running mean of the scene, weight 1/window per frame."""

    window: int = 50
    mean: Optional[np.ndarray] = None


def mean_filter_step(state: MeanFilterState, frame: Frame) -> tuple[MeanFilterState, ErrorFrame]:
    """Error against the running mean, then fold the frame into the mean.

    The first frame initializes the mean, so its error is zero everywhere.
    """
    data = frame.data.astype(np.float64)
    if state.mean is None:
        state.mean = data.copy()
    elif state.mean.shape != data.shape:
        raise ValidationError(
            f"frame shape {data.shape} does not match state {state.mean.shape}"
        )
    err = np.abs(data - state.mean)
    state.mean += (data - state.mean) / state.window
    return state, make_error_frame(err, source_frame_index=frame.index)


def frame_differencing_step(prev: Frame, cur: Frame) -> ErrorFrame:
    """Per-pixel absolute difference between consecutive frames."""
    if prev.data.shape != cur.data.shape:
        raise ValidationError(
            f"dimension mismatch: {prev.data.shape} vs {cur.data.shape}"
        )
    diff = np.abs(cur.data.astype(np.float64) - prev.data.astype(np.float64))
    return make_error_frame(diff, source_frame_index=cur.index)


@dataclass
class GmmConfig:
    components: int = 3
    learning_rate: float = 0.01
    match_sigmas: float = 2.5
    background_threshold: float = 0.9
    variance_floor: float = 1e-4
    initial_variance: float = 0.0225  # sigma 0.15 for freshly seeded components
    replacement_weight: float = 0.05


@dataclass
class GmmPixelState:
    """Per-pixel mixture of K Gaussians (per-channel means, scalar variance).

    Array shapes: weights (H, W, K); means (H, W, K, C); variances (H, W, K).
    Weights stay on the simplex after every update.
    """

    config: GmmConfig = field(default_factory=GmmConfig)
    weights: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None
    variances: Optional[np.ndarray] = None

    def _init(self, data: np.ndarray) -> None:
        h, w, c = data.shape
        k = self.config.components
        self.weights = np.zeros((h, w, k))
        self.weights[:, :, 0] = 1.0
        self.means = np.zeros((h, w, k, c))
        self.means[:, :, 0, :] = data
        self.variances = np.full((h, w, k), self.config.initial_variance)


def gmm_step(state: GmmPixelState, frame: Frame) -> tuple[GmmPixelState, ErrorFrame]:
    """One online mixture update; returns the binary foreground error frame.

    Per pixel: candidate components are those whose RMS channel distance to
    the pixel is within ``match_sigmas`` standard deviations, and the pixel
    matches the nearest of them. A matched component pulls its weight, mean
    and variance toward the pixel; an unmatched pixel reseeds the
    lowest-weight component. The pixel reads as foreground (error 1.0) when
    no *background* component matches it, where background components are
    the top ones by weight/sigma covering ``background_threshold`` of the
    total weight.
    """
    cfg = state.config
    data = frame.data.astype(np.float64)
    if state.weights is None:
        state._init(data)
        return state, make_error_frame(
            np.zeros_like(data), source_frame_index=frame.index
        )
    if state.means.shape[:2] + state.means.shape[3:] != data.shape[:2] + (data.shape[2],):
        raise ValidationError(
            f"frame shape {data.shape} does not match GMM state {state.means.shape}"
        )

    w, mu, var = state.weights, state.means, state.variances
    c = data.shape[2]
    # squared RMS channel distance to every component
    dist2 = ((data[:, :, None, :] - mu) ** 2).mean(axis=3)
    within = dist2 <= (cfg.match_sigmas**2) * var
    dist2_masked = np.where(within, dist2, np.inf)
    nearest = np.argmin(dist2_masked, axis=2)
    any_match = within.any(axis=2)
    matched = np.zeros_like(w, dtype=bool)
    hh, ww = np.nonzero(any_match)
    matched[hh, ww, nearest[hh, ww]] = True

    # background set before the update: components sorted by weight/sigma,
    # kept until their cumulative weight passes the threshold
    fitness_order = np.argsort(-(w / np.sqrt(var)), axis=2, kind="stable")
    w_sorted = np.take_along_axis(w, fitness_order, axis=2)
    cum = np.cumsum(w_sorted, axis=2)
    keep_sorted = np.zeros_like(w_sorted, dtype=bool)
    keep_sorted[:, :, 0] = True
    keep_sorted[:, :, 1:] = cum[:, :, :-1] < cfg.background_threshold
    is_background = np.zeros_like(keep_sorted)
    np.put_along_axis(is_background, fitness_order, keep_sorted, axis=2)
    fg = ~(within & is_background).any(axis=2)
    error = fg.astype(np.float64)[:, :, None] * np.ones((1, 1, c))

    # matched component update
    lr = cfg.learning_rate
    w *= 1 - lr
    w += lr * matched
    mu += (lr * matched)[:, :, :, None] * (data[:, :, None, :] - mu)
    var += lr * matched * (dist2 - var)

    # unmatched pixels reseed their lowest-weight component
    losers = np.argmin(w, axis=2)
    rr, cc2 = np.nonzero(~any_match)
    kk = losers[rr, cc2]
    w[rr, cc2, kk] = cfg.replacement_weight
    mu[rr, cc2, kk] = data[rr, cc2]
    var[rr, cc2, kk] = cfg.initial_variance

    w /= w.sum(axis=2, keepdims=True)
    np.maximum(var, cfg.variance_floor, out=var)
    return state, make_error_frame(error, source_frame_index=frame.index)
