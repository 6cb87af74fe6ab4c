"""Shallow convolutional encoder-decoder for next-frame prediction.

The network concatenates the ``n`` most recent frames along the channel
axis, downsamples with stride-2 3x3 convolutions while halving the channel
count at every layer, and mirrors the encoder with stride-2 transposed
convolutions back up to the input resolution. The final activation is a
clamp to ``[0, 1]``; hidden layers use a leaky ReLU. Training minimizes a
mean L1 objective which can optionally ignore, or adversarially invert,
the penalty inside annotated boxes.

Everything is plain numpy. A convolution is evaluated as an im2col gather
followed by one matrix multiply; the transposed convolution is implemented
as the exact adjoint (col2im scatter) of that same gather. Because forward
deconvolution, convolution input gradients, and deconvolution input
gradients are all expressed through the one im2col/col2im pair, the decoder
restores the encoder's spatial dimensions exactly and the analytic
gradients agree with finite differences to rounding error.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .core import BoundingBox, Frame, ValidationError, make_frame

LEAKY_SLOPE = 0.1

MODEL_MAGIC = b"ROIAE01\x00"

LOSS_MODES = ("plain_l1", "ignore_boxes", "adversarial_boxes")


class ModelFileError(ValueError):
    """Model weight file is malformed (bad magic, truncation, size mismatch)."""


class TrainingDivergedError(RuntimeError):
    """Loss became NaN during training."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``base_channels`` defaults to ``4 * n_input_frames``; pass an explicit
    value to switch to a fixed-width first layer instead. Input dimensions
    must be divisible by ``stride ** num_layers`` so that the decoder can
    invert the downsampling exactly; arbitrary video sizes are handled by
    the pipeline, which pads frames up to the next valid size and crops the
    prediction back.
    """

    n_input_frames: int = 4
    base_channels: Optional[int] = None
    num_layers: int = 6
    kernel_size: int = 3
    stride: int = 2
    input_width: int = 256
    input_height: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.base_channels is None:
            object.__setattr__(self, "base_channels", 4 * self.n_input_frames)
        if self.n_input_frames < 1:
            raise ValidationError(f"need at least 1 input frame, got {self.n_input_frames}")
        if self.num_layers < 1:
            raise ValidationError(f"need at least 1 layer, got {self.num_layers}")
        if self.base_channels < 1:
            raise ValidationError(f"channel underflow: base_channels {self.base_channels}")
        if self.kernel_size % 2 != 1:
            raise ValidationError(f"kernel size must be odd, got {self.kernel_size}")
        factor = self.stride**self.num_layers
        if self.input_width % factor or self.input_height % factor:
            raise ValidationError(
                f"input {self.input_width}x{self.input_height} not divisible by "
                f"stride^num_layers = {factor}"
            )

    @property
    def encoder_channels(self) -> tuple[int, ...]:
        """Output channels of encoder layer i: max(1, base // 2**i)."""
        return tuple(max(1, self.base_channels // 2**i) for i in range(self.num_layers))

    @property
    def input_channels(self) -> int:
        return 3 * self.n_input_frames


@dataclass
class ConvLayer:
    """One convolution (or transposed convolution) layer.

    Convolution weights are ``(out_ch, in_ch, k, k)``; transposed
    convolution weights are ``(in_ch, out_ch, k, k)``. Bias is per output
    channel in both cases.
    """

    weights: np.ndarray
    bias: np.ndarray


@dataclass
class Model:
    config: ModelConfig
    encoder: list[ConvLayer]
    decoder: list[ConvLayer]

    def parameters(self) -> Iterator[np.ndarray]:
        """All parameter arrays in a fixed order (encoder first)."""
        for layer in self.encoder + self.decoder:
            yield layer.weights
            yield layer.bias

    def astype(self, dtype) -> "Model":
        return Model(
            config=self.config,
            encoder=[ConvLayer(l.weights.astype(dtype), l.bias.astype(dtype)) for l in self.encoder],
            decoder=[ConvLayer(l.weights.astype(dtype), l.bias.astype(dtype)) for l in self.decoder],
        )


def weights_checksum(model: Model) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(np.ascontiguousarray(p, dtype=np.float32).tobytes())
    return h.hexdigest()


def _layer_shapes(config: ModelConfig) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """(in_ch, out_ch) per encoder layer and per decoder layer."""
    enc_out = config.encoder_channels
    enc = []
    c_in = config.input_channels
    for c_out in enc_out:
        enc.append((c_in, c_out))
        c_in = c_out
    # mirror: each decoder layer undoes one encoder halving; the last one
    # lands on 3 channels (a single RGB frame) instead of 3n.
    dec = []
    rev = list(reversed(enc_out))
    for j in range(config.num_layers):
        d_out = rev[j + 1] if j + 1 < config.num_layers else 3
        dec.append((rev[j], d_out))
    return enc, dec


def build_model(config: ModelConfig) -> Model:
    """Initialize a model with fan-in-scaled uniform weights from the seed.

    Deterministic: equal configs (including seed) produce bit-identical
    weights.
    """
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    enc_shapes, dec_shapes = _layer_shapes(config)
    encoder = []
    for c_in, c_out in enc_shapes:
        bound = np.sqrt(6.0 / (c_in * k * k))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(np.float32)
        encoder.append(ConvLayer(w, np.zeros(c_out, dtype=np.float32)))
    decoder = []
    for j, (c_in, c_out) in enumerate(dec_shapes):
        bound = np.sqrt(6.0 / (c_in * k * k))
        w = rng.uniform(-bound, bound, size=(c_in, c_out, k, k)).astype(np.float32)
        bias = np.zeros(c_out, dtype=np.float32)
        if j == len(dec_shapes) - 1:
            # start the clamped output mid-range so pixels are not born
            # saturated (saturated outputs receive no gradient)
            bias += np.float32(0.5)
        decoder.append(ConvLayer(w, bias))
    return Model(config=config, encoder=encoder, decoder=decoder)


# ---------------------------------------------------------------------------
# conv primitives (single image, channels-first)
# ---------------------------------------------------------------------------


def _out_hw(h: int, w: int, k: int, s: int, p: int) -> tuple[int, int]:
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    """Gather k*k patches of (C, H, W) into columns (C*k*k, Ho*Wo)."""
    c, h, w = x.shape
    ho, wo = _out_hw(h, w, k, s, p)
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], k: int, s: int, p: int) -> np.ndarray:
    """Exact adjoint of :func:`_im2col`: scatter-add columns back to (C, H, W)."""
    c, h, w = shape
    ho, wo = _out_hw(h, w, k, s, p)
    xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            xp[:, i : i + s * ho : s, j : j + s * wo : s] += cols[:, i, j]
    return xp[:, p : p + h, p : p + w]


def _conv(x: np.ndarray, layer: ConvLayer, k: int, s: int, p: int):
    c_out = layer.weights.shape[0]
    ho, wo = _out_hw(x.shape[1], x.shape[2], k, s, p)
    cols = _im2col(x, k, s, p)
    y = layer.weights.reshape(c_out, -1) @ cols
    y += layer.bias[:, None]
    return y.reshape(c_out, ho, wo), cols


def _deconv(x: np.ndarray, layer: ConvLayer, out_hw: tuple[int, int], k: int, s: int, p: int):
    """Transposed convolution: the adjoint of a stride-s conv from out_hw."""
    c_in, c_out = layer.weights.shape[0], layer.weights.shape[1]
    cols = layer.weights.reshape(c_in, -1).T @ x.reshape(c_in, -1)
    y = _col2im(cols, (c_out, out_hw[0], out_hw[1]), k, s, p)
    y += layer.bias[:, None, None]
    return y


def _leaky(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _leaky_grad(pre: np.ndarray) -> np.ndarray:
    return np.where(pre > 0, 1.0, LEAKY_SLOPE).astype(pre.dtype)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def stack_frames(frames: Sequence[Frame]) -> np.ndarray:
    """Concatenate frames oldest-first along the channel axis -> (3n, H, W)."""
    arrays = [np.moveaxis(f.data, -1, 0) for f in frames]
    return np.concatenate(arrays, axis=0)


def _check_input(model: Model, x: np.ndarray) -> None:
    cfg = model.config
    want = (cfg.input_channels, cfg.input_height, cfg.input_width)
    if x.shape != want:
        raise ValidationError(f"model expects input {want}, got {x.shape}")


def _forward_arrays(model: Model, x: np.ndarray, need_cache: bool):
    """Run the net on a (3n, H, W) stack; returns (pre-clamp output, cache)."""
    cfg = model.config
    k, s = cfg.kernel_size, cfg.stride
    p = (k - 1) // 2
    cache = [] if need_cache else None
    # center the [0, 1] pixel range; uncentered inputs make the narrow
    # encoder prone to stalling in a predict-the-mean plateau
    a = x - np.asarray(0.5, dtype=x.dtype)
    for layer in model.encoder:
        pre, cols = _conv(a, layer, k, s, p)
        if need_cache:
            cache.append(("conv", cols, pre, a.shape))
        a = _leaky(pre)
    n_dec = len(model.decoder)
    for j, layer in enumerate(model.decoder):
        out_hw = (a.shape[1] * s, a.shape[2] * s)
        pre = _deconv(a, layer, out_hw, k, s, p)
        if need_cache:
            cache.append(("deconv", a, pre, None))
        a = _leaky(pre) if j < n_dec - 1 else pre
    return a, cache


def forward(model: Model, frames: Sequence[Frame]) -> Frame:
    """Predict the next frame from the ``n_input_frames`` most recent frames.

    Output values are clamped to ``[0, 1]``.
    """
    cfg = model.config
    if len(frames) != cfg.n_input_frames:
        raise ValidationError(
            f"model takes {cfg.n_input_frames} frames, got {len(frames)}"
        )
    x = stack_frames(frames)
    _check_input(model, x)
    pre, _ = _forward_arrays(model, x.astype(model.encoder[0].weights.dtype), need_cache=False)
    out = np.clip(np.moveaxis(pre, 0, -1), 0.0, 1.0)
    return make_frame(out, index=frames[-1].index + 1)


@dataclass(frozen=True)
class LossSpec:
    """Which pixels the L1 objective counts, and with what sign.

    ``gt_boxes`` is required for the two box-aware modes (an empty list is
    allowed on samples that happen to contain no boxes). ``valid_mask`` is
    an optional (H, W) bool array of pixels eligible for the loss at all;
    pixels outside it (e.g. above the horizon) contribute nothing in any
    mode.
    """

    mode: str = "plain_l1"
    gt_boxes: Optional[Sequence[BoundingBox]] = None
    valid_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValidationError(f"unknown loss mode {self.mode!r}")
        if self.mode != "plain_l1" and self.gt_boxes is None:
            raise ValidationError(f"mode {self.mode!r} requires gt_boxes")
        if self.mode == "plain_l1" and self.gt_boxes is not None:
            raise ValidationError("plain_l1 does not take gt_boxes")


def _boxes_mask(h: int, w: int, boxes: Sequence[BoundingBox]) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    for b in boxes:
        mask[max(0, b.y_min) : b.y_max, max(0, b.x_min) : b.x_max] = True
    return mask


def _as_hwc(x) -> np.ndarray:
    return x.data if isinstance(x, (Frame,)) else np.asarray(x)


def _loss_masks(shape: tuple[int, int], spec: LossSpec):
    """(outside, inside) pixel masks for the requested mode."""
    h, w = shape
    valid = (
        np.ones((h, w), dtype=bool)
        if spec.valid_mask is None
        else spec.valid_mask.astype(bool)
    )
    if spec.mode == "plain_l1":
        if not valid.any():
            raise ValidationError("valid_mask excludes every pixel")
        return valid, None
    inbox = _boxes_mask(h, w, spec.gt_boxes)
    outside = valid & ~inbox
    if not outside.any():
        raise ValidationError("boxes (plus mask) cover the whole frame; no outside region")
    return outside, (valid & inbox)


def l1_loss(pred, target, spec: LossSpec = LossSpec()) -> float:
    """Mean absolute error between prediction and target.

    ``plain_l1``: mean over every (valid) pixel and channel.
    ``ignore_boxes``: mean over pixels outside all ground-truth boxes.
    ``adversarial_boxes``: mean outside minus mean inside, so that
    minimizing the loss *maximizes* the in-box prediction error.
    """
    p, t = _as_hwc(pred), _as_hwc(target)
    if p.shape != t.shape:
        raise ValidationError(f"dimension mismatch: {p.shape} vs {t.shape}")
    diff = np.abs(p.astype(np.float64) - t.astype(np.float64))
    outside, inside = _loss_masks(p.shape[:2], spec)
    loss = diff[outside].mean()
    if inside is not None and spec.mode == "adversarial_boxes":
        loss -= diff[inside].mean() if inside.any() else 0.0
    return float(loss)


def l1_loss_grad(pred, target, spec: LossSpec = LossSpec()) -> np.ndarray:
    """Gradient of :func:`l1_loss` with respect to the prediction.

    Uses subgradient 0 at the |x| = 0 kinks. Shape matches the prediction
    (H, W, C).
    """
    p, t = _as_hwc(pred), _as_hwc(target)
    diff = p.astype(np.float64) - t.astype(np.float64)
    sign = np.sign(diff)
    outside, inside = _loss_masks(p.shape[:2], spec)
    c = p.shape[2]
    grad = np.zeros_like(diff)
    n_out = outside.sum() * c
    grad[outside] = sign[outside] / n_out
    if inside is not None and spec.mode == "adversarial_boxes" and inside.any():
        n_in = inside.sum() * c
        grad[inside] -= sign[inside] / n_in
    return grad


@dataclass
class Gradients:
    encoder: list[ConvLayer]
    decoder: list[ConvLayer]

    def parameters(self) -> Iterator[np.ndarray]:
        for layer in self.encoder + self.decoder:
            yield layer.weights
            yield layer.bias


def backward(
    model: Model, frames: Sequence[Frame] | np.ndarray, target: Frame | np.ndarray, spec: LossSpec = LossSpec()
) -> tuple[float, Gradients]:
    """Loss and exact gradients of every parameter for one sample.

    ``frames`` may be the list of input frames or an already-stacked
    ``(3n, H, W)`` array; ``target`` a Frame or ``(H, W, 3)`` array.
    """
    cfg = model.config
    k, s = cfg.kernel_size, cfg.stride
    p = (k - 1) // 2
    x = frames if isinstance(frames, np.ndarray) else stack_frames(frames)
    _check_input(model, x)
    dtype = model.encoder[0].weights.dtype
    x = x.astype(dtype, copy=False)
    pre_out, cache = _forward_arrays(model, x, need_cache=True)

    clamped = np.clip(pre_out, 0.0, 1.0)
    pred_hwc = np.moveaxis(clamped, 0, -1)
    t_hwc = _as_hwc(target)
    loss = l1_loss(pred_hwc, t_hwc, spec)
    dpred = l1_loss_grad(pred_hwc, t_hwc, spec)
    # clamp passes gradient only where it is not saturated
    da = np.moveaxis(dpred, -1, 0) * ((pre_out > 0.0) & (pre_out < 1.0))
    da = da.astype(dtype)

    enc_grads = [None] * len(model.encoder)
    dec_grads = [None] * len(model.decoder)
    n_enc = len(model.encoder)
    n_dec = len(model.decoder)
    for idx in range(len(cache) - 1, -1, -1):
        kind, stored, pre, x_shape = cache[idx]
        if idx >= n_enc:
            j = idx - n_enc
            layer = model.decoder[j]
            if j < n_dec - 1:
                da = da * _leaky_grad(pre)
            a_in = stored
            c_in = a_in.shape[0]
            dcols = _im2col(da, k, s, p)
            dw = (a_in.reshape(c_in, -1) @ dcols.T).reshape(layer.weights.shape)
            db = da.sum(axis=(1, 2))
            dec_grads[j] = ConvLayer(dw, db)
            da = (layer.weights.reshape(c_in, -1) @ dcols).reshape(a_in.shape)
        else:
            layer = model.encoder[idx]
            da = da * _leaky_grad(pre)
            cols = stored
            c_out = layer.weights.shape[0]
            dy = da.reshape(c_out, -1)
            dw = (dy @ cols.T).reshape(layer.weights.shape)
            db = da.sum(axis=(1, 2))
            enc_grads[idx] = ConvLayer(dw, db)
            dcols = layer.weights.reshape(c_out, -1).T @ dy
            da = _col2im(dcols, x_shape, k, s, p)
    return loss, Gradients(encoder=enc_grads, decoder=dec_grads)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainSample:
    """One supervised example: n input frames and the frame that follows.

    ``boxes`` feeds the box-aware loss modes; ``valid_mask`` excludes
    pixels (e.g. above the horizon) from the loss entirely.
    """

    inputs: Sequence[Frame]
    target: Frame
    boxes: Optional[Sequence[BoundingBox]] = None
    valid_mask: Optional[np.ndarray] = None


def sliding_windows(
    frames: Sequence[Frame],
    n_input_frames: int,
    gt_boxes: Optional[dict[int, Sequence[BoundingBox]]] = None,
) -> list[TrainSample]:
    """Build every (n inputs, next target) window from an ordered sequence."""
    samples = []
    for i in range(len(frames) - n_input_frames):
        target = frames[i + n_input_frames]
        boxes = gt_boxes.get(target.index, []) if gt_boxes is not None else None
        samples.append(
            TrainSample(inputs=frames[i : i + n_input_frames], target=target, boxes=boxes)
        )
    return samples


class _Adam:
    def __init__(self, params: list[np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1t = 1 - self.b1**self.t
        b2t = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g.astype(np.float64, copy=False)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)).astype(p.dtype)


def train(
    model: Model,
    samples: Sequence[TrainSample],
    epochs: int = 1,
    learning_rate: float = 1e-3,
    mode: str = "plain_l1",
    log=None,
) -> tuple[Model, list[float]]:
    """Adam training over the sample list in fixed order.

    Returns the trained model and the per-epoch mean losses. Deterministic
    for a fixed seed, config, and sample order. Raises
    :class:`TrainingDivergedError` if the loss turns NaN.
    """
    if not samples:
        raise ValidationError("empty training dataset")
    for smp in samples:
        if len(smp.inputs) != model.config.n_input_frames:
            raise ValidationError(
                f"sample has {len(smp.inputs)} inputs, model takes "
                f"{model.config.n_input_frames}"
            )
    params = list(model.parameters())
    opt = _Adam(params, lr=learning_rate)
    history = []
    for epoch in range(epochs):
        total = 0.0
        for smp in samples:
            spec = LossSpec(
                mode=mode,
                gt_boxes=smp.boxes if mode != "plain_l1" else None,
                valid_mask=smp.valid_mask,
            )
            loss, grads = backward(model, smp.inputs, smp.target, spec)
            if np.isnan(loss):
                raise TrainingDivergedError(
                    f"loss is NaN at epoch {epoch}, step {opt.t}"
                )
            opt.step(params, list(grads.parameters()))
            total += loss
        mean = total / len(samples)
        history.append(mean)
        if log is not None:
            log(epoch, mean)
    return model, history


# ---------------------------------------------------------------------------
# weight file format
# ---------------------------------------------------------------------------

_HEADER_FIELDS = 8  # n, base, layers, kernel, stride, width, height, seed


def save_model(model: Model, path: str) -> None:
    """Write magic, config integers (little-endian int64), then float32 weights."""
    cfg = model.config
    header = struct.pack(
        "<8q",
        cfg.n_input_frames,
        cfg.base_channels,
        cfg.num_layers,
        cfg.kernel_size,
        cfg.stride,
        cfg.input_width,
        cfg.input_height,
        cfg.seed,
    )
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(header)
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path: str) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MODEL_MAGIC) or blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFileError(f"bad magic in {path}")
    off = len(MODEL_MAGIC)
    header_size = 8 * _HEADER_FIELDS
    if len(blob) < off + header_size:
        raise ModelFileError(f"truncated header in {path}")
    fields = struct.unpack_from("<8q", blob, off)
    off += header_size
    config = ModelConfig(
        n_input_frames=fields[0],
        base_channels=fields[1],
        num_layers=fields[2],
        kernel_size=fields[3],
        stride=fields[4],
        input_width=fields[5],
        input_height=fields[6],
        seed=fields[7],
    )
    model = build_model(config)
    for p in model.parameters():
        nbytes = p.size * 4
        if off + nbytes > len(blob):
            raise ModelFileError(f"truncated weights in {path}")
        p[...] = np.frombuffer(blob, dtype="<f4", count=p.size, offset=off).reshape(p.shape)
        off += nbytes
    if off != len(blob):
        raise ModelFileError(f"{len(blob) - off} trailing bytes in {path}")
    return model


def pad_to_multiple(data: np.ndarray, multiple: int) -> np.ndarray:
    """Replicate-pad an (H, W, C) array up to the next multiple on both axes."""
    h, w = data.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return data
    return np.pad(data, ((0, ph), (0, pw), (0, 0)), mode="edge")
