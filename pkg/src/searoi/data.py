"""Sequence and telemetry ingestion, ground-truth parsing, prediction
serialization, and a deterministic synthetic maritime scene generator.

File formats
------------
* Frames: 8-bit PNG or binary PPM files whose stem contains the frame
  index (``frame_000017.png``); values are normalized to [0, 1] on load.
* Telemetry: JSON-lines, one record per frame with keys ``frame``,
  ``altitude_m``, ``gimbal_pitch_deg``, ``roll_deg``, ``focal_px``.
* Ground truth: one JSON object mapping frame index to a list of
  ``[x_min, y_min, x_max, y_max]`` boxes.
* Predictions: JSON-lines, one record per frame:
  ``{"frame": i, "p": budget, "regions": [[x_min,y_min,x_max,y_max,score], ...]}``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .core import (
    BoundingBox,
    Frame,
    RegionSet,
    Telemetry,
    ValidationError,
    make_frame,
)
from .evaluate import GroundTruth

FRAME_SUFFIXES = (".png", ".ppm")

TELEMETRY_KEYS = ("frame", "altitude_m", "gimbal_pitch_deg", "roll_deg", "focal_px")


@dataclass(frozen=True)
class SequenceManifest:
    """A frame directory plus its optional telemetry and ground-truth files."""

    directory: Path
    frame_files: tuple[Path, ...]
    telemetry_file: Optional[Path] = None
    ground_truth_file: Optional[Path] = None
    fps: float = 30.0

    @classmethod
    def scan(cls, directory: Union[str, Path], fps: float = 30.0) -> "SequenceManifest":
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"sequence directory {directory} does not exist")
        indexed = []
        for path in sorted(directory.iterdir()):
            if path.suffix.lower() not in FRAME_SUFFIXES:
                continue
            m = re.search(r"(\d+)", path.stem)
            if m:
                indexed.append((int(m.group(1)), path))
        indexed.sort()
        telemetry = directory / "telemetry.jsonl"
        gt = directory / "gt.json"
        return cls(
            directory=directory,
            frame_files=tuple(p for _, p in indexed),
            telemetry_file=telemetry if telemetry.exists() else None,
            ground_truth_file=gt if gt.exists() else None,
            fps=fps,
        )


def _frame_index(path: Path) -> int:
    m = re.search(r"(\d+)", path.stem)
    if not m:
        raise ValidationError(f"frame file {path.name} carries no index")
    return int(m.group(1))


def load_frame_file(path: Union[str, Path]) -> np.ndarray:
    """Decode one 8-bit image file to a float32 (H, W, 3) array in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValidationError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float32) / np.float32(255.0)


def save_frame_file(frame: Frame, path: Union[str, Path]) -> None:
    """Quantize to 8 bits and write PNG or binary PPM (by extension)."""
    arr = np.round(np.asarray(frame.data, dtype=np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_telemetry(path: Union[str, Path]) -> dict[int, Telemetry]:
    records = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{line_no}: bad JSON: {exc}") from exc
            missing = [k for k in TELEMETRY_KEYS if k not in obj]
            if missing:
                raise ValidationError(f"{path}:{line_no}: missing keys {missing}")
            records[int(obj["frame"])] = Telemetry(
                altitude_m=float(obj["altitude_m"]),
                gimbal_pitch_deg=float(obj["gimbal_pitch_deg"]),
                roll_deg=float(obj["roll_deg"]),
                focal_px=float(obj["focal_px"]),
            )
    return records


def save_telemetry(records: dict[int, Telemetry], path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        for index in sorted(records):
            t = records[index]
            fh.write(
                json.dumps(
                    {
                        "frame": index,
                        "altitude_m": t.altitude_m,
                        "gimbal_pitch_deg": t.gimbal_pitch_deg,
                        "roll_deg": t.roll_deg,
                        "focal_px": t.focal_px,
                    }
                )
                + "\n"
            )


def load_sequence(manifest: SequenceManifest) -> Iterator[Frame]:
    """Frames in index order with telemetry joined by frame index.

    Frame indices must be consecutive; telemetry (when present) must cover
    exactly the frame set.
    """
    if not manifest.frame_files:
        raise ValidationError(f"no frame files in {manifest.directory}")
    indices = [_frame_index(p) for p in manifest.frame_files]
    start = indices[0]
    for pos, idx in enumerate(indices):
        if idx != start + pos:
            raise ValidationError(
                f"frame index gap in {manifest.directory}: expected {start + pos}, "
                f"found {idx}"
            )
    telemetry = None
    if manifest.telemetry_file is not None:
        telemetry = load_telemetry(manifest.telemetry_file)
        if len(telemetry) != len(indices):
            raise ValidationError(
                f"telemetry rows ({len(telemetry)}) != frame count ({len(indices)})"
            )
        gaps = [i for i in indices if i not in telemetry]
        if gaps:
            raise ValidationError(f"telemetry missing frames {gaps[:5]}")
    for idx, path in zip(indices, manifest.frame_files):
        data = load_frame_file(path)
        yield make_frame(
            data, index=idx, telemetry=telemetry[idx] if telemetry else None
        )


def parse_ground_truth(
    path: Union[str, Path],
    frame_width: Optional[int] = None,
    frame_height: Optional[int] = None,
) -> GroundTruth:
    """Read the frame -> boxes JSON map, validating and clamping each box."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"malformed ground truth {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"ground truth {path} must be a JSON object")
    boxes: dict[int, tuple[BoundingBox, ...]] = {}
    for key, entries in raw.items():
        frame_boxes = []
        for entry in entries:
            x0, y0, x1, y1 = (int(v) for v in entry[:4])
            box = BoundingBox(x0, y0, x1, y1)
            if frame_width is not None and frame_height is not None:
                box = box.clamped(frame_width, frame_height)
            frame_boxes.append(box)
        boxes[int(key)] = tuple(frame_boxes)
    return GroundTruth(boxes=boxes)


def save_ground_truth(gt: GroundTruth, path: Union[str, Path]) -> None:
    payload = {
        str(k): [[b.x_min, b.y_min, b.x_max, b.y_max] for b in v]
        for k, v in sorted(gt.boxes.items())
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------


def write_predictions(
    region_sets: Sequence[RegionSet],
    path: Union[str, Path],
    timings_ms: Optional[dict[int, float]] = None,
) -> None:
    with open(path, "w") as fh:
        for rs in region_sets:
            record = {
                "frame": rs.frame_index,
                "p": rs.budget_p,
                "regions": [
                    [b.x_min, b.y_min, b.x_max, b.y_max, b.score if b.score is not None else 0.0]
                    for b in rs.regions
                ],
            }
            if timings_ms is not None and rs.frame_index in timings_ms:
                record["ms"] = timings_ms[rs.frame_index]
            fh.write(json.dumps(record) + "\n")


@dataclass
class PredictionFile:
    region_sets: list[RegionSet]
    out_of_bounds: bool = False  # set when some region exceeded the frame extent


def read_predictions(
    path: Union[str, Path],
    frame_width: Optional[int] = None,
    frame_height: Optional[int] = None,
) -> PredictionFile:
    """Parse a predictions file; flags (does not reject) out-of-bounds boxes."""
    sets = []
    warn = False
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{line_no}: bad JSON: {exc}") from exc
            try:
                boxes = []
                for entry in obj["regions"]:
                    x0, y0, x1, y1 = entry[:4]
                    score = entry[4] if len(entry) > 4 else None
                    boxes.append(BoundingBox(int(x0), int(y0), int(x1), int(y1), score))
                rs = RegionSet(
                    frame_index=int(obj["frame"]),
                    regions=tuple(boxes),
                    budget_p=float(obj["p"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{line_no}: malformed record: {exc}") from exc
            if frame_width is not None and frame_height is not None:
                for b in boxes:
                    if b.x_min < 0 or b.y_min < 0 or b.x_max > frame_width or b.y_max > frame_height:
                        warn = True
            sets.append(rs)
    return PredictionFile(region_sets=sets, out_of_bounds=warn)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnomalySpec:
    """A persistent square object drifting across the scene."""

    size: int
    intensity: float
    velocity: tuple[float, float] = (0.0, 0.0)
    entry_frame: int = 0
    start: tuple[int, int] = (0, 0)
    lifetime: Optional[int] = None  # frames; None = until the sequence ends

    def box_at(self, frame_index: int) -> Optional[BoundingBox]:
        if frame_index < self.entry_frame:
            return None
        if self.lifetime is not None and frame_index >= self.entry_frame + self.lifetime:
            return None
        dt = frame_index - self.entry_frame
        x = int(round(self.start[0] + self.velocity[0] * dt))
        y = int(round(self.start[1] + self.velocity[1] * dt))
        return BoundingBox(x, y, x + self.size, y + self.size)


@dataclass(frozen=True)
class SyntheticConfig:
    """Deterministic drifting-wave sea scene with glints and anomalies.

    The background is a sum of sinusoidal luminance fields moving at
    different velocities plus per-frame Gaussian noise, so it is temporally
    unstable; glints are one-frame bright speckles; anomalies persist and
    move slowly. Everything derives from ``seed``.
    """

    width: int = 192
    height: int = 128
    num_frames: int = 100
    seed: int = 0
    wave_amplitude: float = 0.12
    wave_speed: float = 1.0
    wave_components: int = 3
    noise_sigma: float = 0.02
    anomalies: tuple[AnomalySpec, ...] = ()
    glint_rate: float = 0.0
    glint_size: int = 3
    glint_intensity: float = 0.98
    glint_speckles: int = 1  # speckles per glint event (a glitter patch)
    glint_spread: int = 24  # patch radius the speckles scatter over
    base_level: float = 0.45
    altitude_m: float = 100.0
    gimbal_pitch_deg: float = -30.0  # horizon far above the frame: no mask
    roll_deg: float = 0.0
    focal_px: float = 1000.0

    def __post_init__(self):
        if not 0 <= self.base_level <= 1:
            raise ValidationError(f"base level {self.base_level} outside [0, 1]")
        for a in self.anomalies:
            if not 0 <= a.intensity <= 1:
                raise ValidationError(f"anomaly intensity {a.intensity} outside [0, 1]")
            last = self.num_frames - 1
            if a.lifetime is not None:
                last = min(last, a.entry_frame + a.lifetime - 1)
            for t in (a.entry_frame, last):
                box = a.box_at(t)
                if box is None:
                    continue
                if box.x_min < 0 or box.y_min < 0 or box.x_max > self.width or box.y_max > self.height:
                    raise ValidationError(
                        f"anomaly leaves the {self.width}x{self.height} frame at "
                        f"frame {t}: ({box.x_min},{box.y_min},{box.x_max},{box.y_max})"
                    )

    def telemetry(self) -> Telemetry:
        return Telemetry(
            altitude_m=self.altitude_m,
            gimbal_pitch_deg=self.gimbal_pitch_deg,
            roll_deg=self.roll_deg,
            focal_px=self.focal_px,
        )


def iter_synthetic(config: SyntheticConfig) -> Iterator[tuple[Frame, tuple[BoundingBox, ...]]]:
    """Yield (frame, gt boxes) pairs lazily; bit-deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    yy, xx = np.meshgrid(
        np.arange(config.height, dtype=np.float64),
        np.arange(config.width, dtype=np.float64),
        indexing="ij",
    )
    waves = []
    for _ in range(config.wave_components):
        wavelength = rng.uniform(40.0, 120.0)
        direction = rng.uniform(0.0, 2 * math.pi)
        kx = 2 * math.pi / wavelength * math.cos(direction)
        ky = 2 * math.pi / wavelength * math.sin(direction)
        speed = rng.uniform(0.5, 2.0) * config.wave_speed
        phase = rng.uniform(0.0, 2 * math.pi)
        omega = speed * 2 * math.pi / wavelength
        waves.append((kx * xx + ky * yy + phase, omega))
    amplitude = config.wave_amplitude / max(1, config.wave_components)
    telemetry = config.telemetry()
    for t in range(config.num_frames):
        lum = np.zeros((config.height, config.width))
        for spatial, omega in waves:
            lum += np.sin(spatial - omega * t)
        frame = config.base_level + amplitude * lum
        frame = frame[:, :, None] * np.array([0.85, 1.0, 1.1])
        if config.noise_sigma > 0:
            frame = frame + rng.normal(0.0, config.noise_sigma, size=frame.shape)
        if config.glint_rate > 0:
            for _ in range(rng.poisson(config.glint_rate)):
                # one event is a glitter patch: a handful of speckles
                # scattered around a common center, alive for this frame only
                cx = int(rng.integers(0, config.width))
                cy = int(rng.integers(0, config.height))
                for _ in range(config.glint_speckles):
                    gx = cx + int(rng.integers(-config.glint_spread, config.glint_spread + 1))
                    gy = cy + int(rng.integers(-config.glint_spread, config.glint_spread + 1))
                    gx = min(max(gx, 0), config.width - config.glint_size)
                    gy = min(max(gy, 0), config.height - config.glint_size)
                    frame[gy : gy + config.glint_size, gx : gx + config.glint_size, :] = (
                        config.glint_intensity
                    )
        boxes = []
        for a in config.anomalies:
            box = a.box_at(t)
            if box is None:
                continue
            frame[box.y_min : box.y_max, box.x_min : box.x_max, :] = a.intensity
            boxes.append(box)
        frame = np.clip(frame, 0.0, 1.0)
        # quantize to the 8-bit grid so that saving and reloading frame
        # files reproduces the pixel values bit-exactly
        quantized = np.round(frame * 255.0).astype(np.uint8).astype(np.float32) / np.float32(255.0)
        yield make_frame(quantized, index=t, telemetry=telemetry), tuple(boxes)


def generate_synthetic(config: SyntheticConfig) -> tuple[list[Frame], GroundTruth]:
    """Materialize the whole synthetic sequence and its ground truth."""
    frames = []
    boxes: dict[int, tuple[BoundingBox, ...]] = {}
    for frame, frame_boxes in iter_synthetic(config):
        frames.append(frame)
        if frame_boxes:
            boxes[frame.index] = frame_boxes
    return frames, GroundTruth(boxes=boxes)


def write_synthetic_sequence(
    config: SyntheticConfig, out_dir: Union[str, Path], image_format: str = "png"
) -> SequenceManifest:
    """Write frames, telemetry, and ground truth in the on-disk formats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    telemetry = {}
    gt_boxes: dict[int, tuple[BoundingBox, ...]] = {}
    for frame, boxes in iter_synthetic(config):
        save_frame_file(frame, out / f"frame_{frame.index:06d}.{image_format}")
        telemetry[frame.index] = frame.telemetry
        if boxes:
            gt_boxes[frame.index] = boxes
    save_telemetry(telemetry, out / "telemetry.jsonl")
    save_ground_truth(GroundTruth(boxes=gt_boxes), out / "gt.json")
    return SequenceManifest.scan(out)
