"""Command-line entry point: ``evkit {simulate,render,augment,eval,bench,fixture}``.

Parameters are resolved as command-line flags, then a ``--config`` file
(``key = value`` lines), then built-in defaults. Summaries go to stdout,
diagnostics to stderr. Exit status is 0 on success, 2 for usage errors or
missing inputs, 1 for any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .dataset import DEFAULT_PLAN, augment_dataset, load_dataset, parse_plan, save_dataset, split_dataset
from .ensemble import BlobParams, FusionConfig, FusionMethod, blob_detect, ensemble_predictions
from .evaluation import (
    DEFAULT_CONFIDENCE_THRESHOLD,
    DEFAULT_IOU_THRESHOLD,
    EvalConfig,
    evaluate,
    fps_bench,
    read_ground_truth,
    read_predictions,
)
from .events import EventFormat, read_events, write_events
from .fixtures import FIXTURES, write_fixture
from .frames import FrameMode, export_counts, frame_sequence, load_png, render_png
from .simulator import SimParams, load_frames, load_params, simulate_video

log = logging.getLogger("evkit")

DEFAULT_SEED = 0
THREADS_ENV = "EVKIT_THREADS"


class UsageError(Exception):
    """Bad input paths or flags: exit status 2."""


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get(THREADS_ENV, "1")))


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- simulate

_SIM_FLAGS = {
    "theta_on": float,
    "theta_off": float,
    "leak_rate_hz": float,
    "shot_noise_rate_hz": float,
    "lin_log_knee": float,
}


def _sim_params(args) -> SimParams:
    params = SimParams()
    if args.config:
        params = load_params(_require(args.config, "config file"), params)
    overrides = {k: getattr(args, k) for k in _SIM_FLAGS if getattr(args, k) is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.dark_noise:
        overrides["shot_noise_dark_scaling"] = True
    if args.no_noise:
        overrides["leak_rate_hz"] = 0.0
        overrides["shot_noise_rate_hz"] = 0.0
    return replace(params, **overrides)


def cmd_simulate(args) -> int:
    src = _require(args.input, "input video")
    params = _sim_params(args)
    frames = load_frames(src, fps=args.fps, timestamps=args.timestamps)
    start = time.perf_counter()
    stream = simulate_video(frames, params)
    elapsed = time.perf_counter() - start
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_events(stream, out, args.format)
    video_s = (frames[-1].t - frames[0].t) * 1e-6
    rate = len(stream) / elapsed if elapsed > 0 else 0.0
    print(
        f"{len(stream)} events from {len(frames)} frames ({stream.width}x{stream.height}), "
        f"duration {video_s:.3f} s, {rate:.0f} events/s"
    )
    return 0


# ---------------------------------------------------------------- render


def cmd_render(args) -> int:
    src = _require(args.events, "event file")
    stream = read_events(src, args.format)
    if len(stream) and args.window_us is None:
        raise UsageError("--window-us is required")
    stride = args.stride_us or args.window_us
    t_start = args.t_start
    t_end = args.t_end
    if len(stream) == 0 and (t_start is None or t_end is None):
        frames = []
    else:
        frames = frame_sequence(
            stream, args.window_us, stride, FrameMode.COUNT_2CH, t_start, t_end, args.drop_partial
        )
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)

    def work(item):
        k, f = item
        stem = f"{args.prefix}{k:05d}"
        render_png(f, out / f"{stem}.png")
        if args.export_counts:
            export_counts(f, out / f"{stem}.bin")
        return int(f.counts.sum())

    with ThreadPoolExecutor(max_workers=_threads(args)) as pool:
        counted = sum(pool.map(work, enumerate(frames)))
    tiled = stride == args.window_us
    note = ""
    if tiled:
        note = "; tiling conserved" if counted == len(stream) else "; tiling NOT conserved"
    print(f"rendered {len(frames)} frames; {counted} events accumulated of {len(stream)}{note}")
    return 0


# ---------------------------------------------------------------- augment


def cmd_augment(args) -> int:
    root = _require(args.dataset, "dataset directory")
    samples = load_dataset(root)
    train, test = split_dataset(samples, args.ratio, args.seed)
    plan = parse_plan(args.plan) if args.plan else DEFAULT_PLAN
    augmented = augment_dataset(train, plan, args.multiplier, args.seed)
    extra = {
        "split_ratio": args.ratio,
        "multiplier": args.multiplier,
        "seed": args.seed,
        "plan": [f"{s.transform}:{s.probability:g}:{s.low:g}:{s.high:g}" for s in plan],
    }
    save_dataset(args.output, {"train": augmented, "test": test}, extra)
    print(
        f"{len(samples)} samples -> train {len(train)} (augmented to {len(augmented)}), test {len(test)}"
    )
    return 0


# ---------------------------------------------------------------- eval / bench


def _frame_store(frames_dir: Path | None):
    cache = {}

    def get(image_id: str):
        if image_id not in cache:
            if frames_dir is None:
                raise UsageError("blob detectors need --frames")
            png = frames_dir / f"{image_id}.png"
            cache[image_id] = load_png(png) if png.exists() else None
        return cache[image_id]

    return get


def _run_detector(spec: str, image_ids, frames_dir: Path | None) -> dict:
    """Predictions for ``image_ids`` from a prediction directory or a ``blob:`` spec."""
    if spec == "blob" or spec.startswith("blob:"):
        params = BlobParams.parse(spec[5:]) if spec.startswith("blob:") else BlobParams()
        get = _frame_store(frames_dir)
        out = {}
        for i in image_ids:
            frame = get(i)
            out[i] = blob_detect(frame, params) if frame is not None else []
        return out
    preds = read_predictions(_require(spec, "prediction directory"))
    return preds


def cmd_eval(args) -> int:
    gt = read_ground_truth(_require(args.gt, "ground-truth directory"))
    frames_dir = _require(args.frames, "frames directory") if args.frames else None
    ids = sorted(gt)
    sets = [_run_detector(spec, ids, frames_dir) for spec in args.pred]
    config = EvalConfig(args.iou, args.conf, args.ap_method)
    if len(sets) == 1:
        preds, mode = sets[0], "SMT"
    else:
        fusion = FusionConfig(FusionMethod(args.ensemble), args.ensemble_iou, len(sets))
        preds, mode = ensemble_predictions(sets, fusion), f"EMT-{args.ensemble.upper()}"
    report = evaluate(preds, gt, config)
    report.mode = mode
    print(report.table())
    if args.json:
        text = report.to_json(include_pr=args.include_pr) + "\n"
        if args.json == "-":
            sys.stdout.write(text)
        else:
            Path(args.json).write_text(text)
    if args.pr_csv:
        Path(args.pr_csv).write_text(report.pr_csv())
    return 0


def _bench_detector(spec: str, frames_dir: Path):
    if spec.startswith("sleep:"):
        delay = float(spec[6:]) / 1e3

        def stub(item):
            time.sleep(delay)
            return []

        return stub
    if spec == "blob" or spec.startswith("blob:"):
        params = BlobParams.parse(spec[5:]) if spec.startswith("blob:") else BlobParams()
        return lambda item: blob_detect(item[1], params)
    preds = read_predictions(_require(spec, "prediction directory"))
    return lambda item: preds.get(item[0], [])


def cmd_bench(args) -> int:
    frames_dir = _require(args.frames, "frames directory")
    pngs = sorted(frames_dir.glob("*.png"))
    if not pngs:
        raise UsageError(f"no PNG frames in {frames_dir}")
    items = [(p.stem, load_png(p)) for p in pngs]
    if args.repeat > 1:
        items = items * args.repeat
    detector = _bench_detector(args.detector, frames_dir)
    stats = fps_bench(detector, items, args.warmup)
    print(
        f"{stats.n_frames} frames: {stats.fps:.1f} FPS "
        f"(mean {stats.mean_latency_s * 1e3:.3f} ms, p50 {stats.p50_latency_s * 1e3:.3f} ms, "
        f"p99 {stats.p99_latency_s * 1e3:.3f} ms)"
    )
    if args.json:
        Path(args.json).write_text(json.dumps(stats.to_dict(), sort_keys=True, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------- fixture


def cmd_fixture(args) -> int:
    out = write_fixture(args.name, args.output, args.seed)
    spec = FIXTURES[args.name]
    print(f"wrote fixture {args.name}: {spec.n_frames} frames {spec.width}x{spec.height} to {out}")
    return 0


# ---------------------------------------------------------------- parser


class _DefaultsFormatter(argparse.HelpFormatter):
    """Append ``(default: X)`` only where it tells the reader something."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or any(action.default is v for v in (None, False, argparse.SUPPRESS)) or not action.option_strings:
            return text
        return f"{text} (default: {action.default})"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    common.add_argument(
        "--threads", type=int, default=None, help=f"worker cap (default: ${THREADS_ENV} or 1)"
    )

    fmt = _DefaultsFormatter
    parser = argparse.ArgumentParser(
        prog="evkit",
        description="Event-camera simulation, event frames, dataset tooling and detection evaluation.",
        epilog="Precedence: command-line flags > --config file > built-in defaults.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    d = SimParams()
    p = sub.add_parser("simulate", parents=[common], formatter_class=fmt, help="convert frames to events",
                       epilog="Precedence: flags > --config > defaults.")
    p.add_argument("input", help="directory of numbered frames or an .npz video")
    p.add_argument("-o", "--output", required=True, help="event file (.csv or .bin)")
    p.add_argument("--format", choices=[f.value for f in EventFormat], default=None,
                   help="event file format (default: from suffix)")
    p.add_argument("--fps", type=float, default=None, help="frame rate when no timestamps file exists")
    p.add_argument("--timestamps", default=None, help="file with one microsecond timestamp per frame")
    p.add_argument("--config", default=None, help="key = value parameter file")
    p.add_argument("--theta-on", dest="theta_on", type=float, default=None,
                   help=f"ON contrast threshold [default {d.theta_on}]")
    p.add_argument("--theta-off", dest="theta_off", type=float, default=None,
                   help=f"OFF contrast threshold [default {d.theta_off}]")
    p.add_argument("--leak-rate-hz", dest="leak_rate_hz", type=float, default=None,
                   help=f"leak events per pixel per second [default {d.leak_rate_hz}]")
    p.add_argument("--shot-noise-rate-hz", dest="shot_noise_rate_hz", type=float, default=None,
                   help=f"shot noise events per pixel per second [default {d.shot_noise_rate_hz}]")
    p.add_argument("--lin-log-knee", dest="lin_log_knee", type=float, default=None,
                   help=f"lin-log knee in DN [default {d.lin_log_knee}]")
    p.add_argument("--dark-noise", action="store_true", help="scale shot noise up in dark pixels")
    p.add_argument("--no-noise", action="store_true", help="disable leak and shot noise")
    p.add_argument("--seed", type=int, default=None, help=f"noise seed [default {DEFAULT_SEED}]")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("render", parents=[common], formatter_class=fmt, help="accumulate events into frames")
    p.add_argument("events", help="event file")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--format", choices=[f.value for f in EventFormat], default=None,
                   help="event file format (default: from suffix)")
    p.add_argument("--window-us", type=int, default=None, help="window length; use the source inter-frame period")
    p.add_argument("--stride-us", type=int, default=None, help="window stride (default: window length)")
    p.add_argument("--t-start", type=int, default=None, help="first window start (default: first event)")
    p.add_argument("--t-end", type=int, default=None, help="span end (default: last event + 1)")
    p.add_argument("--drop-partial", action="store_true", help="drop the trailing partial window")
    p.add_argument("--export-counts", action="store_true", help="also write 2-channel count tensors")
    p.add_argument("--prefix", default="window_", help="output file stem prefix")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("augment", parents=[common], formatter_class=fmt, help="split and augment a dataset")
    p.add_argument("dataset", help="directory with images/ and labels/")
    p.add_argument("-o", "--output", required=True, help="output dataset directory")
    p.add_argument("--ratio", type=float, default=0.75, help="train fraction of the split")
    p.add_argument("--multiplier", type=float, default=2.5, help="training set growth factor")
    p.add_argument("--plan", default=None,
                   help="name:prob[:low:high],... (default: hflip:0.5,rotate:0.4:-15:15,crop:0.3:0.6:0.9,shear:0.3:-0.2:0.2)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="split and augmentation seed")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt,
                       help="score predictions (one --pred: SMT, several: EMT)")
    p.add_argument("--gt", required=True, help="ground-truth label directory")
    p.add_argument("--pred", action="append", required=True,
                   help="prediction directory or blob[:key=value,...]; repeat for an ensemble")
    p.add_argument("--frames", default=None, help="rendered frames for blob detectors")
    p.add_argument("--iou", type=float, default=DEFAULT_IOU_THRESHOLD, help="IoU threshold for a match")
    p.add_argument("--conf", type=float, default=DEFAULT_CONFIDENCE_THRESHOLD, help="confidence threshold")
    p.add_argument("--ap-method", choices=["all_point", "11_point"], default="all_point", help="AP interpolation")
    p.add_argument("--ensemble", choices=[m.value for m in FusionMethod], default="nms", help="fusion method")
    p.add_argument("--ensemble-iou", type=float, default=0.55, help="IoU used by fusion")
    p.add_argument("--json", default=None, help="write the JSON report here ('-' for stdout)")
    p.add_argument("--include-pr", action="store_true", help="include PR points in the JSON report")
    p.add_argument("--pr-csv", default=None, help="write PR curves as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], formatter_class=fmt, help="measure detector FPS")
    p.add_argument("--detector", required=True, help="prediction directory, blob[:params] or sleep:<ms>")
    p.add_argument("--frames", required=True, help="directory of PNG frames")
    p.add_argument("--warmup", type=int, default=5, help="untimed warm-up frames")
    p.add_argument("--repeat", type=int, default=1, help="cycle the frame list this many times")
    p.add_argument("--json", default=None, help="write stats as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fixture", parents=[common], formatter_class=fmt, help="write a synthetic test video")
    p.add_argument("name", choices=sorted(FIXTURES))
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="texture seed")
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"evkit {args.command}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"evkit {args.command}: not found: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"evkit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
