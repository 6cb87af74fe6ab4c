"""Command-line entry point.

Subcommands: ``train``, ``infer``, ``eval``, ``bench``, ``synth``.
Exit codes: 0 success, 2 usage or input error, 3 runtime failure.

Every subcommand accepts ``--config FILE`` holding ``key = value`` lines
(keys named after the long flags, underscores allowed); explicit flags
override the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from . import data as dio
from .core import GridSpec, ValidationError, cells_for_budget, make_frame
from .evaluate import (
    CANONICAL_BUDGETS,
    EvalReport,
    average_recall,
    recall_at_p,
)
from .pipeline import PipelineConfig, RoiPipeline
from .postprocess import horizon_line, horizon_keep_mask

STORE_TRUE_FLAGS = {"--timing"}


def _parse_grid(text: str) -> GridSpec:
    try:
        cols, rows = text.lower().split("x")
        return GridSpec(int(cols), int(rows))
    except (ValueError, TypeError) as exc:
        raise argparse.ArgumentTypeError(f"grid must look like 48x27, got {text!r}") from exc


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except (ValueError, TypeError) as exc:
        raise argparse.ArgumentTypeError(f"size must look like 1920x1080, got {text!r}") from exc


def _parse_switch(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {text!r}")
    return text == "on"


def load_config_file(path: str) -> dict[str, str]:
    values = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{line_no}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def expand_config(argv: list[str]) -> list[str]:
    """Splice config-file entries in front of explicit flags (which win)."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        return argv
    values = load_config_file(argv[i + 1])
    flags: list[str] = []
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        if flag in STORE_TRUE_FLAGS:
            if value.lower() in ("true", "1", "yes", "on"):
                flags.append(flag)
        else:
            flags.extend([flag, value])
    # insert right after the subcommand token
    return argv[:1] + flags + argv[1:]


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--method", choices=("auto", "mf", "fd", "gmm"), default="auto")
    p.add_argument("--model", help="model weight file (method auto)")
    p.add_argument("--grid", type=_parse_grid, default=GridSpec(48, 27), metavar="WxH")
    p.add_argument("--p", type=float, default=0.05, help="area budget fraction")
    p.add_argument("--momentum", type=int, default=2, help="error momentum window")
    p.add_argument("--lnr-iters", type=int, default=3)
    p.add_argument("--horizon", type=_parse_switch, default=True, metavar="{on,off}")
    p.add_argument("--merge", type=_parse_switch, default=False, metavar="{on,off}")
    p.add_argument("--seed", type=int, default=0)


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        method=args.method,
        model_path=args.model,
        grid=args.grid,
        budget_p=args.p,
        momentum=args.momentum,
        lnr_iterations=args.lnr_iters,
        horizon=args.horizon,
        merge=args.merge,
        overlap_mode=getattr(args, "overlap_mode", "coverage"),
        seed=args.seed,
    )


def _load_model_for(args) -> ae.Model | None:
    if args.method != "auto":
        return None
    if not args.model:
        raise ValidationError("method 'auto' requires --model")
    return ae.load_model(args.model)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    sequences = []
    for d in args.sequences:
        manifest = dio.SequenceManifest.scan(d)
        frames = list(dio.load_sequence(manifest))
        gt = None
        if args.loss != "plain":
            if manifest.ground_truth_file is None:
                raise ValidationError(
                    f"--loss {args.loss} needs a gt.json next to the frames in {d}"
                )
            gt = dio.parse_ground_truth(
                manifest.ground_truth_file, frames[0].width, frames[0].height
            )
        sequences.append((frames, gt))

    first = sequences[0][0][0]
    factor = 2**args.layers
    padded = ae.pad_to_multiple(np.asarray(first.data), factor)
    config = ae.ModelConfig(
        n_input_frames=args.n_frames,
        base_channels=args.base_channels,
        num_layers=args.layers,
        input_width=padded.shape[1],
        input_height=padded.shape[0],
        seed=args.seed,
    )
    model = ae.build_model(config)
    mode = {"plain": "plain_l1", "ignore": "ignore_boxes", "adversarial": "adversarial_boxes"}[
        args.loss
    ]

    samples = []
    for frames, gt in sequences:
        if len(frames) < args.n_frames + 1:
            raise ValidationError(
                f"sequence too short: {len(frames)} frames, need {args.n_frames + 1}"
            )
        padded_frames = [
            make_frame(
                ae.pad_to_multiple(np.asarray(f.data), factor),
                index=f.index,
                telemetry=f.telemetry,
            )
            for f in frames
        ]
        gt_map = {k: list(v) for k, v in gt.boxes.items()} if gt else None
        windows = ae.sliding_windows(padded_frames, args.n_frames, gt_map)
        if args.horizon:
            for w in windows:
                t = w.target.telemetry
                if t is not None:
                    line = horizon_line(t, w.target.width, w.target.height)
                    w.valid_mask = horizon_keep_mask(line, w.target.width, w.target.height)
        samples.extend(windows)

    def log(epoch: int, mean_loss: float) -> None:
        print(json.dumps({"epoch": epoch, "mean_loss": mean_loss}))

    model, _ = ae.train(
        model, samples, epochs=args.epochs, learning_rate=args.lr, mode=mode, log=log
    )
    ae.save_model(model, args.out)
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def cmd_infer(args) -> int:
    config = _pipeline_config(args)
    model = _load_model_for(args)
    manifest = dio.SequenceManifest.scan(args.sequence)
    pipe = RoiPipeline(config, model=model)

    accumulator = None
    gt = None
    if args.recon_stats:
        from .evaluate import ReconErrorAccumulator

        gt_file = args.gt or manifest.ground_truth_file
        if gt_file is None:
            raise ValidationError("--recon-stats needs ground truth (gt.json or --gt)")
        gt = dio.parse_ground_truth(gt_file)
        accumulator = ReconErrorAccumulator()

    region_sets = []
    timings = {}
    for result in pipe.run(dio.load_sequence(manifest)):
        if result.regions is None:
            continue
        region_sets.append(result.regions)
        if args.timing:
            timings[result.frame_index] = result.total_ms
        if accumulator is not None:
            accumulator.add(result.raw_error, gt.boxes.get(result.frame_index, ()))
    dio.write_predictions(region_sets, args.out, timings_ms=timings if args.timing else None)
    if accumulator is not None:
        err_b, err_r, delta_r = accumulator.stats()
        with open(args.recon_stats, "w") as fh:
            json.dump({"err_b": err_b, "err_r": err_r, "delta_r": delta_r}, fh)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    gt = dio.parse_ground_truth(args.gt)
    recalls = {}
    record_counts = []
    for pred_path in args.pred:
        pf = dio.read_predictions(pred_path)
        if pf.out_of_bounds:
            print(f"warning: out-of-bounds regions in {pred_path}", file=sys.stderr)
        if not pf.region_sets:
            raise ValidationError(f"{pred_path} holds no prediction records")
        budgets = {rs.budget_p for rs in pf.region_sets}
        if len(budgets) != 1:
            raise ValidationError(f"{pred_path} mixes budgets {sorted(budgets)}")
        p = budgets.pop()
        max_area = None
        if args.frame is not None:
            frame_w, frame_h = args.frame
            cell_area = (frame_w // args.grid.cols) * (frame_h // args.grid.rows)
            max_area = cells_for_budget(p, args.grid.cell_count) * cell_area
        recalls[round(p, 2)] = recall_at_p(
            pf.region_sets,
            gt,
            overlap_mode=args.overlap_mode,
            max_area=max_area,
        )
        record_counts.extend(len(rs.regions) for rs in pf.region_sets)

    ar = None
    if sorted(recalls) == sorted(CANONICAL_BUDGETS):
        ar = average_recall(recalls)
    report = EvalReport(
        recalls=recalls,
        ar=ar,
        mean_boxes=float(np.mean(record_counts)) if record_counts else None,
    )
    if args.recon:
        with open(args.recon) as fh:
            stats = json.load(fh)
        report.err_b = stats.get("err_b")
        report.err_r = stats.get("err_r")
        report.delta_r = stats.get("delta_r")
    print(report.to_json())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    if args.reps < 1:
        raise ValidationError(f"repetitions must be >= 1, got {args.reps}")
    config = _pipeline_config(args)
    model = _load_model_for(args)

    warmup = args.warmup
    if args.method == "auto" and warmup < model.config.n_input_frames:
        raise ValidationError(
            f"warmup {warmup} shorter than the model's {model.config.n_input_frames} "
            "input frames"
        )

    if args.sequence:
        manifest = dio.SequenceManifest.scan(args.sequence)
        if len(manifest.frame_files) < warmup + args.reps:
            raise ValidationError(
                f"sequence holds {len(manifest.frame_files)} frames, need "
                f"{warmup + args.reps} (warmup + measured)"
            )
        # preload so that disk I/O never pollutes the timings
        frames = list(dio.load_sequence(manifest))[: warmup + args.reps]

        def frame_source():
            return iter(frames)

    else:
        synth = dio.SyntheticConfig(
            width=args.width,
            height=args.height,
            num_frames=warmup + args.reps,
            seed=args.seed,
            glint_rate=2.0,
        )

        def frame_source():
            return (frame for frame, _ in dio.iter_synthetic(synth))

    pipe = RoiPipeline(config, model=model)
    stage_samples: dict[str, list[float]] = {}
    digest = hashlib.sha256()
    measured = 0
    seen = 0
    for frame in frame_source():
        result = pipe.process(frame)
        seen += 1
        if seen <= warmup or result.regions is None:
            continue
        for stage, ms in result.timings_ms.items():
            stage_samples.setdefault(stage, []).append(ms)
        digest.update(
            json.dumps(
                [
                    [b.x_min, b.y_min, b.x_max, b.y_max, b.score]
                    for b in result.regions.regions
                ]
            ).encode()
        )
        measured += 1
    if measured < args.reps:
        raise ValidationError(f"only {measured} frames measured, wanted {args.reps}")

    stages = {}
    for stage, samples in stage_samples.items():
        mean = statistics.fmean(samples)
        stages[stage] = {
            "mean_ms": mean,
            "median_ms": statistics.median(samples),
            "p95_ms": float(np.percentile(samples, 95)),
            "fps": 1000.0 / mean if mean > 0 else float("inf"),
        }
    print(
        json.dumps(
            {
                "method": args.method,
                "width": args.width if not args.sequence else None,
                "height": args.height if not args.sequence else None,
                "frames_measured": measured,
                "warmup": warmup,
                "stages": stages,
                "regions_sha256": digest.hexdigest(),
            }
        )
    )
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _synthetic_config(args) -> dio.SyntheticConfig:
    values = {}
    if args.spec:
        with open(args.spec) as fh:
            values = json.load(fh)
    anomalies = tuple(
        dio.AnomalySpec(
            size=int(a["size"]),
            intensity=float(a["intensity"]),
            velocity=tuple(a.get("velocity", (0.0, 0.0))),
            entry_frame=int(a.get("entry_frame", 0)),
            start=tuple(a.get("start", (0, 0))),
            lifetime=a.get("lifetime"),
        )
        for a in values.pop("anomalies", [])
    )
    for flag in ("width", "height", "seed"):
        if getattr(args, flag) is not None:
            values[flag] = getattr(args, flag)
    if args.frames is not None:
        values["num_frames"] = args.frames
    if args.glint_rate is not None:
        values["glint_rate"] = args.glint_rate
    return dio.SyntheticConfig(anomalies=anomalies, **values)


def cmd_synth(args) -> int:
    config = _synthetic_config(args)
    dio.write_synthetic_sequence(config, args.out, image_format=args.format)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="searoi",
        description="Bandwidth-bounded region-of-interest proposals for maritime video",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the next-frame predictor")
    p_train.add_argument("--config")
    p_train.add_argument("--sequences", nargs="+", required=True, metavar="DIR")
    p_train.add_argument("--out", required=True, help="model file to write")
    p_train.add_argument("--epochs", type=int, default=5)
    p_train.add_argument("--lr", type=float, default=1e-3)
    p_train.add_argument(
        "--loss", choices=("plain", "ignore", "adversarial"), default="plain"
    )
    p_train.add_argument("--n-frames", type=int, default=4)
    p_train.add_argument("--base-channels", type=int, default=None)
    p_train.add_argument("--layers", type=int, default=6)
    p_train.add_argument("--horizon", type=_parse_switch, default=True, metavar="{on,off}")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="emit region proposals for a sequence")
    _add_pipeline_flags(p_infer)
    p_infer.add_argument("--sequence", required=True, metavar="DIR")
    p_infer.add_argument("--out", required=True, help="predictions jsonl to write")
    p_infer.add_argument("--timing", action="store_true", help="append per-frame ms")
    p_infer.add_argument("--gt", help="ground truth for --recon-stats")
    p_infer.add_argument("--recon-stats", help="write err_b/err_r/delta_r JSON here")
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--config")
    p_eval.add_argument("--pred", nargs="+", required=True, metavar="FILE")
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument(
        "--overlap-mode", choices=("coverage", "iou"), default="coverage"
    )
    p_eval.add_argument("--csv", help="write the area-recall curve here")
    p_eval.add_argument("--recon", help="recon-stats JSON from infer --recon-stats")
    p_eval.add_argument("--grid", type=_parse_grid, default=GridSpec(48, 27), metavar="WxH")
    p_eval.add_argument(
        "--frame",
        type=_parse_size,
        default=None,
        metavar="WxH",
        help="frame size; enables the per-frame budget check",
    )
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="per-stage throughput on preloaded frames")
    _add_pipeline_flags(p_bench)
    p_bench.add_argument("--sequence", metavar="DIR", help="frame directory (preloaded)")
    p_bench.add_argument("--width", type=int, default=1920, help="synthetic frame width")
    p_bench.add_argument("--height", type=int, default=1080, help="synthetic frame height")
    p_bench.add_argument("--reps", type=int, required=True, help="measured frames")
    p_bench.add_argument("--warmup", type=int, default=8)
    p_bench.set_defaults(func=cmd_bench)

    p_synth = sub.add_parser("synth", help="write a synthetic scene to disk")
    p_synth.add_argument("--config")
    p_synth.add_argument("--spec", help="JSON file of scene parameters")
    p_synth.add_argument("--out", required=True, metavar="DIR")
    p_synth.add_argument("--width", type=int, default=None)
    p_synth.add_argument("--height", type=int, default=None)
    p_synth.add_argument("--frames", type=int, default=None)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--glint-rate", type=float, default=None)
    p_synth.add_argument("--format", choices=("png", "ppm"), default="png")
    p_synth.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = expand_config(argv)
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except (
        ValidationError,
        FileNotFoundError,
        ae.ModelFileError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ae.TrainingDivergedError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
