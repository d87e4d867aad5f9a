"""Combining detections from several models, plus a reference blob detector.

Fusion works per image: each model contributes a list of detections and
``ensemble_merge`` returns one list. The blob detector turns event-frame
activity into single-class detections so the evaluation pipeline can run
without a trained network.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .dataset import ClassId, NormBox
from .evaluation import Detection, iou, iou_xyxy
from .frames import BACKGROUND, EventFrame, FrameMode


class FusionMethod(enum.Enum):
    NMS = "nms"
    WBF = "wbf"


@dataclass(frozen=True)
class FusionConfig:
    method: FusionMethod = FusionMethod.NMS
    iou_threshold: float = 0.55
    n_models: int = 2

    def __post_init__(self):
        object.__setattr__(self, "method", FusionMethod(self.method))
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if self.n_models < 1:
            raise ValueError("n_models must be positive")


def _by_confidence(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.confidence)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; result sorted by descending confidence."""
    kept: list[Detection] = []
    for cls in sorted({d.cls for d in dets}):
        remaining = _by_confidence([d for d in dets if d.cls == cls])
        while remaining:
            best = remaining.pop(0)
            kept.append(best)
            remaining = [d for d in remaining if iou(best.box, d.box) < iou_threshold]
    return _by_confidence(kept)


def _wbf(dets: Sequence[Detection], iou_threshold: float, n_models: int) -> list[Detection]:
    fused: list[Detection] = []
    for cls in sorted({d.cls for d in dets}):
        clusters: list[list[Detection]] = []
        boxes: list[tuple[float, float, float, float]] = []
        for d in _by_confidence([d for d in dets if d.cls == cls]):
            corners = d.box.corners
            best, best_iou = -1, -1.0
            for k, fb in enumerate(boxes):
                v = iou_xyxy(corners, fb)
                if v > best_iou:
                    best, best_iou = k, v
            if best < 0 or best_iou < iou_threshold:
                clusters.append([d])
                boxes.append(corners)
            else:
                clusters[best].append(d)
                boxes[best] = _weighted_corners(clusters[best])
        for members, corners in zip(clusters, boxes):
            size = len(members)
            conf = sum(m.confidence for m in members) / size
            conf *= min(size, n_models) / n_models
            fused.append(Detection(cls, min(conf, 1.0), NormBox.from_corners(*corners)))
    return _by_confidence(fused)


def _weighted_corners(members: Sequence[Detection]) -> tuple[float, float, float, float]:
    w = np.array([m.confidence for m in members])
    c = np.array([m.box.corners for m in members])
    total = w.sum()
    if total <= 0:
        return tuple(c.mean(axis=0))
    return tuple((w[:, None] * c).sum(axis=0) / total)


def ensemble_merge(det_sets: Sequence[Sequence[Detection]], config: FusionConfig | None = None) -> list[Detection]:
    """Fuse the per-model detection lists for one image."""
    config = config or FusionConfig(n_models=max(len(det_sets), 1))
    pooled = []
    for k, s in enumerate(det_sets):
        for d in s:
            if not isinstance(d, Detection) or d.cls not in ClassId.__members__.values():
                raise ValueError(f"model {k}: detection outside the class universe: {d!r}")
            pooled.append(d)
    if config.method is FusionMethod.NMS:
        return nms(pooled, config.iou_threshold)
    return _wbf(pooled, config.iou_threshold, config.n_models)


def ensemble_predictions(
    model_predictions: Sequence[Mapping[str, Sequence[Detection]]],
    config: FusionConfig | None = None,
) -> dict[str, list[Detection]]:
    """Image-wise fusion across models; images absent from a model count as empty."""
    config = config or FusionConfig(n_models=max(len(model_predictions), 1))
    ids = sorted(set().union(*[set(m) for m in model_predictions])) if model_predictions else []
    return {i: ensemble_merge([m.get(i, ()) for m in model_predictions], config) for i in ids}


# ---------------------------------------------------------------- blob detector


@dataclass(frozen=True)
class BlobParams:
    activity_threshold: int = 1
    min_area: int = 4
    connectivity: int = 8
    confidence_norm: float = 100.0
    cls: ClassId = ClassId.CAR

    def __post_init__(self):
        if self.min_area < 1:
            raise ValueError("min_area must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.confidence_norm <= 0:
            raise ValueError("confidence_norm must be positive")
        object.__setattr__(self, "cls", ClassId(self.cls))

    @classmethod
    def parse(cls, text: str) -> "BlobParams":
        """``key=value`` pairs separated by commas, e.g. ``min_area=9,connectivity=4``."""
        aliases = {"threshold": "activity_threshold", "norm": "confidence_norm", "area": "min_area"}
        kwargs = {}
        for item in filter(None, (s.strip() for s in text.split(","))):
            if "=" not in item:
                raise ValueError(f"bad blob parameter {item!r}")
            k, v = (s.strip() for s in item.split("=", 1))
            k = aliases.get(k, k)
            if k == "confidence_norm":
                kwargs[k] = float(v)
            elif k in ("activity_threshold", "min_area", "connectivity", "cls"):
                kwargs[k] = int(v)
            else:
                raise ValueError(f"unknown blob parameter {k!r}")
        return cls(**kwargs)


def _activity(frame: EventFrame, threshold: int) -> tuple[np.ndarray, np.ndarray]:
    """Binary activity mask and per-pixel event weight."""
    if frame.mode is FrameMode.COUNT_2CH:
        weight = frame.payload.sum(axis=0)
        return weight >= threshold, weight
    active = frame.payload != BACKGROUND
    return active, active.astype(np.int64)


def blob_detect(frame: EventFrame, params: BlobParams | None = None) -> list[Detection]:
    params = params or BlobParams()
    active, weight = _activity(frame, params.activity_threshold)
    if not active.any():
        return []
    structure = ndimage.generate_binary_structure(2, 1 if params.connectivity == 4 else 2)
    labels, n = ndimage.label(active, structure=structure)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(labels), labels, idx)
    events = ndimage.sum_labels(weight, labels, idx)
    slices = ndimage.find_objects(labels)
    dets = []
    for k, sl in enumerate(slices):
        if areas[k] < params.min_area:
            continue
        rows, cols = sl
        box = NormBox.from_pixels(cols.start, rows.start, cols.stop, rows.stop, frame.width, frame.height)
        conf = min(1.0, float(events[k]) / params.confidence_norm)
        dets.append(Detection(params.cls, conf, box))
    return _by_confidence(dets)
