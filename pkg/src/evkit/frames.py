"""Accumulation of event windows into 2-D event frames."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .events import EventStream, slice_events

BACKGROUND = 128
ON_LEVEL = 255
OFF_LEVEL = 0

# RGB per class id; index 4+ falls back to white
CLASS_COLORS = [(255, 64, 64), (64, 200, 255), (255, 220, 0), (80, 255, 80)]


class FrameMode(enum.Enum):
    TRI_LEVEL = "tri"
    COUNT_2CH = "count"


@dataclass(frozen=True)
class EventFrame:
    """Event window rendered on the sensor grid.

    ``payload`` is ``(H, W)`` uint8 for TRI_LEVEL and ``(2, H, W)`` counts
    (ON plane, OFF plane) for COUNT_2CH. COUNT_2CH frames also keep the
    polarity of the last event at each pixel (0 where none) so they can be
    converted to TRI_LEVEL without the source events.
    """

    width: int
    height: int
    mode: FrameMode
    payload: np.ndarray = field(repr=False)
    window: tuple[int, int]
    last_polarity: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def counts(self) -> np.ndarray:
        if self.mode is not FrameMode.COUNT_2CH:
            raise ValueError("counts are only available on COUNT_2CH frames")
        return self.payload

    def is_background(self) -> bool:
        if self.mode is FrameMode.TRI_LEVEL:
            return bool(np.all(self.payload == BACKGROUND))
        return not self.payload.any()

    def to_tri_level(self) -> "EventFrame":
        if self.mode is FrameMode.TRI_LEVEL:
            return self
        last = self.last_polarity
        if last is None:
            last = np.zeros((self.height, self.width), dtype=np.int8)
        img = tri_level_from_counts(self.payload, last)
        return EventFrame(self.width, self.height, FrameMode.TRI_LEVEL, img, self.window)


def tri_level_from_counts(counts: np.ndarray, last_polarity: np.ndarray) -> np.ndarray:
    """Majority polarity per pixel; ties go to the pixel's last event."""
    on, off = counts[0], counts[1]
    img = np.full(on.shape, BACKGROUND, dtype=np.uint8)
    img[on > off] = ON_LEVEL
    img[off > on] = OFF_LEVEL
    tie = (on == off) & (on > 0)
    img[tie & (last_polarity > 0)] = ON_LEVEL
    img[tie & (last_polarity < 0)] = OFF_LEVEL
    return img


def accumulate(
    stream: EventStream, t0: int, t1: int, mode: FrameMode | str = FrameMode.TRI_LEVEL
) -> EventFrame:
    if t0 > t1:
        raise ValueError(f"invalid window [{t0}, {t1})")
    mode = FrameMode(mode) if not isinstance(mode, FrameMode) else mode
    window = slice_events(stream, t0, t1)
    w, h = stream.width, stream.height
    npix = w * h
    pix = window.pixel_index()
    on_mask = window.p > 0
    on = np.bincount(pix[on_mask], minlength=npix)
    off = np.bincount(pix[~on_mask], minlength=npix)
    counts = np.stack([on, off]).reshape(2, h, w).astype(np.int64)

    last = np.zeros(npix, dtype=np.int8)
    if len(window):
        rev_pix = pix[::-1]
        uniq, first_in_rev = np.unique(rev_pix, return_index=True)
        last[uniq] = window.p[::-1][first_in_rev]
    last = last.reshape(h, w)

    if mode is FrameMode.COUNT_2CH:
        return EventFrame(w, h, mode, counts, (int(t0), int(t1)), last)
    return EventFrame(w, h, mode, tri_level_from_counts(counts, last), (int(t0), int(t1)))


def window_starts(
    t_first: int, t_end: int, window_len: int, stride: int, drop_partial: bool = False
) -> list[int]:
    """Start times of the windows covering ``[t_first, t_end)``.

    Every window that fits entirely inside the span is emitted; if those
    leave a tail uncovered, one more window at the next stride position is
    added (unless ``drop_partial``).
    """
    span = t_end - t_first
    if span <= 0:
        return []
    n_full = (span - window_len) // stride + 1 if span >= window_len else 0
    starts = [t_first + k * stride for k in range(n_full)]
    covered = starts[-1] + window_len if starts else t_first
    if covered < t_end and not drop_partial:
        starts.append(t_first + n_full * stride)
    return starts


def frame_sequence(
    stream: EventStream,
    window_len: int,
    stride: int,
    mode: FrameMode | str = FrameMode.TRI_LEVEL,
    t_start: int | None = None,
    t_end: int | None = None,
    drop_partial: bool = False,
) -> list[EventFrame]:
    """Sliding windows over the stream.

    The span defaults to ``[first event, last event + 1)``; ``t_start`` /
    ``t_end`` override it, e.g. to align windows with source frame times.
    """
    if window_len <= 0 or stride <= 0:
        raise ValueError("window_len and stride must be positive")
    if len(stream) == 0 and (t_start is None or t_end is None):
        return []
    first = int(stream.t[0]) if t_start is None else int(t_start)
    end = int(stream.t[-1]) + 1 if t_end is None else int(t_end)
    return [
        accumulate(stream, s, s + window_len, mode)
        for s in window_starts(first, end, window_len, stride, drop_partial)
    ]


# ---------------------------------------------------------------- output


def _to_image_array(frame: EventFrame) -> np.ndarray:
    return frame.to_tri_level().payload


def render_png(frame: EventFrame, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(_to_image_array(frame), mode="L").save(path)


def overlay_boxes(frame: EventFrame, boxes: Sequence, path: str | Path, class_names=None) -> None:
    """Render the frame with labelled boxes drawn on top.

    ``boxes`` holds Annotation or Detection objects. With no boxes the
    output is the plain grayscale render.
    """
    from PIL import Image, ImageDraw

    img = Image.fromarray(_to_image_array(frame), mode="L")
    if not boxes:
        img.save(path)
        return
    img = img.convert("RGB")
    draw = ImageDraw.Draw(img)
    for b in boxes:
        cls = int(b.cls)
        color = CLASS_COLORS[cls] if cls < len(CLASS_COLORS) else (255, 255, 255)
        x0, y0, x1, y1 = b.box.to_pixels(frame.width, frame.height)
        draw.rectangle([x0, y0, max(x0, x1 - 1), max(y0, y1 - 1)], outline=color)
        label = class_names[cls] if class_names else str(cls)
        conf = getattr(b, "confidence", None)
        if conf is not None:
            label = f"{label} {conf:.2f}"
        draw.text((x0 + 1, max(0, y0 - 11)), label, fill=color)
    img.save(path)


def export_counts(frame: EventFrame, path: str | Path) -> Path:
    """Write ON then OFF planes as u16 LE plus a JSON sidecar; returns the sidecar path."""
    if frame.mode is not FrameMode.COUNT_2CH:
        raise ValueError("count export needs a COUNT_2CH frame")
    path = Path(path)
    clipped = np.minimum(frame.payload, np.iinfo(np.uint16).max).astype("<u2")
    path.write_bytes(clipped.tobytes(order="C"))
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = {
        "width": frame.width,
        "height": frame.height,
        "mode": frame.mode.value,
        "window": list(frame.window),
        "dtype": "uint16-le",
        "planes": ["on", "off"],
    }
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return sidecar


def import_counts(path: str | Path) -> EventFrame:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    w, h = meta["width"], meta["height"]
    counts = np.frombuffer(path.read_bytes(), dtype="<u2").reshape(2, h, w).astype(np.int64)
    return EventFrame(w, h, FrameMode.COUNT_2CH, counts, tuple(meta["window"]))


def load_png(path: str | Path, window: tuple[int, int] = (0, 0)) -> EventFrame:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("L"))
    h, w = arr.shape
    return EventFrame(w, h, FrameMode.TRI_LEVEL, arr.copy(), window)


def total_counts(frames: Iterable[EventFrame]) -> int:
    return int(sum(int(f.counts.sum()) for f in frames))
