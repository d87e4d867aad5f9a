"""Detection scoring: IoU matching, precision/recall, AP, mAP and FPS timing."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import Annotation, ClassId, LabelFormatError, NormBox, _parse_box_line, format_box

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

# thresholds used for the published SMT/EMT experiments
DEFAULT_IOU_THRESHOLD = 0.2
DEFAULT_CONFIDENCE_THRESHOLD = 0.2


class EvaluationError(ValueError):
    pass


class BenchmarkError(RuntimeError):
    def __init__(self, message: str, frame_index: int):
        self.frame_index = frame_index
        super().__init__(f"frame {frame_index}: {message}")


@dataclass(frozen=True)
class Detection:
    cls: ClassId
    confidence: float
    box: NormBox

    def __post_init__(self):
        object.__setattr__(self, "cls", ClassId(self.cls))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD
    ap_method: str = "all_point"

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if not 0 <= self.confidence_threshold < 1:
            raise ValueError("confidence_threshold must lie in [0, 1)")
        if self.ap_method not in ("all_point", "11_point"):
            raise ValueError(f"unknown AP method {self.ap_method!r}")


def iou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two ``(x0, y0, x1, y1)`` rectangles in any common unit."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou(a: NormBox, b: NormBox) -> float:
    return iou_xyxy(a.corners, b.corners)


@dataclass
class MatchResult:
    """``tp[i]`` is whether ``dets[i]`` (input order) matched; ``gt_matched[j]`` likewise for GT."""

    tp: list[bool]
    gt_matched: list[bool]
    assignment: list[int | None]

    @property
    def n_tp(self) -> int:
        return sum(self.tp)

    @property
    def n_fp(self) -> int:
        return len(self.tp) - self.n_tp

    @property
    def n_fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


def match_detections(
    dets: Sequence[Detection], gts: Sequence[Annotation], iou_threshold: float = DEFAULT_IOU_THRESHOLD
) -> MatchResult:
    """Greedy matching in descending confidence.

    Each detection takes the still-unmatched same-class GT with the highest
    IoU (lowest index on ties) when that IoU reaches the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    gt_matched = [False] * len(gts)
    tp = [False] * len(dets)
    assignment: list[int | None] = [None] * len(dets)
    for i in order:
        d = dets[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if gt_matched[j] or g.cls != d.cls:
                continue
            v = iou(d.box, g.box)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= iou_threshold:
            gt_matched[best] = True
            tp[i] = True
            assignment[i] = best
    return MatchResult(tp, gt_matched, assignment)


def pr_curve(flags: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (recall, precision) after each ranked detection."""
    f = np.asarray(flags, dtype=bool)
    tp = np.cumsum(f)
    fp = np.cumsum(~f)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_gt if n_gt > 0 else np.zeros_like(precision, dtype=float)
    return recall, precision


def average_precision(flags: Sequence[bool], n_gt: int, method: str = "all_point") -> float | None:
    """AP of confidence-ranked TP/FP flags; None when there is no ground truth."""
    if n_gt <= 0:
        return None
    if len(flags) == 0:
        return 0.0
    recall, precision = pr_curve(flags, n_gt)
    if method == "11_point":
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r - 1e-12
            total += precision[mask].max() if mask.any() else 0.0
        return total / 11.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


@dataclass
class FpsStats:
    n_frames: int
    mean_latency_s: float
    p50_latency_s: float
    p99_latency_s: float

    @property
    def fps(self) -> float:
        return 1.0 / self.mean_latency_s if self.mean_latency_s > 0 else float("inf")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fps"] = self.fps
        return d


@dataclass
class ClassReport:
    ap: float | None
    n_gt: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    pr_points: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class EvalReport:
    per_class: dict[ClassId, ClassReport]
    mAP: float
    config: EvalConfig
    n_images: int
    fps: FpsStats | None = None
    mode: str = "SMT"

    def to_dict(self, include_pr: bool = False) -> dict:
        classes = {}
        for cls, rep in sorted(self.per_class.items()):
            d = {
                "ap": rep.ap,
                "n_gt": rep.n_gt,
                "tp": rep.tp,
                "fp": rep.fp,
                "fn": rep.fn,
                "precision": rep.precision,
                "recall": rep.recall,
            }
            if include_pr:
                d["pr_points"] = [list(p) for p in rep.pr_points]
            classes[cls.label] = d
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "mode": self.mode,
            "mAP": self.mAP,
            "n_images": self.n_images,
            "config": asdict(self.config),
            "classes": classes,
            "fps": self.fps.to_dict() if self.fps else None,
        }

    def to_json(self, include_pr: bool = False) -> str:
        return json.dumps(self.to_dict(include_pr), sort_keys=True, indent=2)

    def table(self) -> str:
        lines = [f"{'class':<14}{'n_gt':>6}{'TP':>6}{'FP':>6}{'FN':>6}{'P':>8}{'R':>8}{'AP':>8}"]
        for cls, r in sorted(self.per_class.items()):
            ap = "-" if r.ap is None else f"{r.ap:.4f}"
            lines.append(
                f"{cls.label:<14}{r.n_gt:>6}{r.tp:>6}{r.fp:>6}{r.fn:>6}"
                f"{r.precision:>8.4f}{r.recall:>8.4f}{ap:>8}"
            )
        lines.append(f"{self.mode} mAP@{self.config.iou_threshold:g} = {self.mAP:.4f}")
        if self.fps:
            lines.append(
                f"FPS {self.fps.fps:.1f} (mean {self.fps.mean_latency_s * 1e3:.2f} ms, "
                f"p50 {self.fps.p50_latency_s * 1e3:.2f} ms, p99 {self.fps.p99_latency_s * 1e3:.2f} ms)"
            )
        return "\n".join(lines)

    def pr_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "rank", "recall", "precision"])
        for cls, r in sorted(self.per_class.items()):
            for k, (rec, prec) in enumerate(r.pr_points, start=1):
                w.writerow([cls.label, k, f"{rec:.6f}", f"{prec:.6f}"])
        return buf.getvalue()


def evaluate(
    predictions: Mapping[str, Sequence[Detection]],
    ground_truth: Mapping[str, Sequence[Annotation]],
    config: EvalConfig | None = None,
) -> EvalReport:
    """Pool per-image matches by class and compute AP/mAP.

    Images missing from ``predictions`` count as having no detections.
    Equal confidences across images are ranked by image id, so the result
    does not depend on the mapping's iteration order.
    """
    config = config or EvalConfig()
    unknown = sorted(set(predictions) - set(ground_truth))
    if unknown:
        raise EvaluationError(f"predictions for unknown image id {unknown[0]!r}")

    ranked: dict[ClassId, list[tuple[float, str, int, bool]]] = {c: [] for c in ClassId}
    n_gt = {c: 0 for c in ClassId}
    for image_id in sorted(ground_truth):
        gts = ground_truth[image_id]
        for g in gts:
            n_gt[g.cls] += 1
        raw = predictions.get(image_id, ())
        for d in raw:
            if not isinstance(d, Detection):
                raise EvaluationError(f"{image_id}: malformed prediction record {d!r}")
        dets = [d for d in raw if d.confidence >= config.confidence_threshold]
        result = match_detections(dets, gts, config.iou_threshold)
        for idx, (d, hit) in enumerate(zip(dets, result.tp)):
            ranked[d.cls].append((d.confidence, image_id, idx, hit))

    per_class = {}
    aps = []
    for c in ClassId:
        entries = sorted(ranked[c], key=lambda e: (-e[0], e[1], e[2]))
        flags = [e[3] for e in entries]
        ap = average_precision(flags, n_gt[c], config.ap_method)
        recall, precision = pr_curve(flags, n_gt[c])
        tp = int(sum(flags))
        fp = len(flags) - tp
        per_class[c] = ClassReport(
            ap=ap,
            n_gt=n_gt[c],
            tp=tp,
            fp=fp,
            fn=n_gt[c] - tp,
            precision=tp / len(flags) if flags else 0.0,
            recall=tp / n_gt[c] if n_gt[c] else 0.0,
            pr_points=list(zip(recall.tolist(), precision.tolist())),
        )
        if ap is not None:
            aps.append(ap)
    mAP = float(np.mean(aps)) if aps else 0.0
    return EvalReport(per_class, mAP, config, len(ground_truth))


def fps_bench(
    detector: Callable, frames: Sequence, warmup: int = 5, clock: Callable[[], float] = time.perf_counter
) -> FpsStats:
    """Time ``detector(frame)`` on every frame after the first ``warmup``."""
    if warmup < 0:
        raise ValueError("warmup must be non-negative")
    if len(frames) - warmup < 1:
        raise ValueError(f"no frames left to time after {warmup} warm-up frames")
    for i in range(warmup):
        _call(detector, frames[i], i)
    lat = np.empty(len(frames) - warmup)
    for k, i in enumerate(range(warmup, len(frames))):
        start = clock()
        _call(detector, frames[i], i)
        lat[k] = clock() - start
    return FpsStats(
        n_frames=len(lat),
        mean_latency_s=float(lat.mean()),
        p50_latency_s=float(np.percentile(lat, 50)),
        p99_latency_s=float(np.percentile(lat, 99)),
    )


def _call(detector, frame, index):
    try:
        return detector(frame)
    except Exception as exc:
        raise BenchmarkError(f"detector failed: {exc}", index) from exc


# ---------------------------------------------------------------- prediction files


def parse_prediction_text(text: str, path=None) -> list[Detection]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise LabelFormatError(f"expected 'class conf cx cy w h', got {line!r}", lineno, path)
        try:
            conf = float(parts[1])
        except ValueError:
            raise LabelFormatError(f"non-numeric confidence {parts[1]!r}", lineno, path) from None
        if not 0.0 <= conf <= 1.0:
            raise LabelFormatError(f"confidence {conf} outside [0, 1]", lineno, path)
        cls, box = _parse_box_line(parts, lineno, path)
        out.append(Detection(cls, conf, box))
    return out


def read_predictions(directory: str | Path) -> dict[str, list[Detection]]:
    """Per-image prediction files ``<image id>.txt`` -> detections."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    return {p.stem: parse_prediction_text(p.read_text(), p) for p in sorted(directory.glob("*.txt"))}


def write_predictions(predictions: Mapping[str, Sequence[Detection]], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for image_id, dets in predictions.items():
        lines = [f"{int(d.cls)} {d.confidence:.6f} {format_box(d.box)}\n" for d in dets]
        (directory / f"{image_id}.txt").write_text("".join(lines))


def read_ground_truth(directory: str | Path) -> dict[str, list[Annotation]]:
    from .dataset import parse_label_file

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    return {p.stem: parse_label_file(p) for p in sorted(directory.glob("*.txt"))}
