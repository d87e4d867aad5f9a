"""Frame-to-event conversion with a per-pixel log-intensity threshold model.

Each pixel remembers a log intensity. When a new frame arrives, the
difference between the frame's log intensity and the memory is quantized by
the ON or OFF contrast threshold; one event is emitted per whole threshold
crossed, at a timestamp interpolated linearly across the inter-frame
interval, and the memory advances by the crossed quanta only. Leak noise
slowly lowers the memory (producing spurious ON events) and shot noise adds
Poisson-distributed events of both polarities.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .events import EventStream

logger = logging.getLogger(__name__)

LUMA_WEIGHTS_601 = (0.299, 0.587, 0.114)

# relative slack when quantizing a log change into threshold crossings, so
# that changes of exactly k thresholds are not lost to rounding
CROSSING_EPS = 1e-9


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimParams:
    theta_on: float = 0.2
    theta_off: float = 0.2
    leak_rate_hz: float = 0.1
    shot_noise_rate_hz: float = 0.1
    lin_log_knee: float = 20.0
    seed: int = 0
    # scale shot noise by (1 - y/255) so that dark pixels are noisier
    shot_noise_dark_scaling: bool = False

    def __post_init__(self):
        if not self.theta_on > 0 or not self.theta_off > 0:
            raise ValueError("contrast thresholds must be positive")
        if self.leak_rate_hz < 0 or self.shot_noise_rate_hz < 0:
            raise ValueError("noise rates must be non-negative")
        if not 0 < self.lin_log_knee < 255:
            raise ValueError("lin_log_knee must lie strictly between 0 and 255")

    def without_noise(self) -> "SimParams":
        return replace(self, leak_rate_hz=0.0, shot_noise_rate_hz=0.0)


@dataclass
class PixelState:
    """Memorized log intensity per pixel and the time it was last updated."""

    mem: np.ndarray
    t_last: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.mem.shape

    def copy(self) -> "PixelState":
        return PixelState(self.mem.copy(), self.t_last)


@dataclass(frozen=True)
class LumaFrame:
    t: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError(f"luma frame must be 2-D, got shape {self.pixels.shape}")
        if self.t < 0:
            raise ValueError("frame timestamp must be non-negative")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def luma_from_rgb(rgb: np.ndarray, t: int = 0, weights=LUMA_WEIGHTS_601) -> LumaFrame:
    """Weighted RGB to luma conversion, clamped to [0, 255]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 frame, got shape {rgb.shape}")
    y = rgb @ np.asarray(weights, dtype=np.float64)
    return LumaFrame(int(t), np.clip(y, 0.0, 255.0))


def lin_log(y, knee: float = 20.0):
    """Log intensity with a linear segment below ``knee``.

    Below the knee the curve is the chord from the origin to ``(knee, ln knee)``,
    which keeps black pixels finite and the mapping continuous and monotone.
    """
    if np.isscalar(y):
        y = float(y)
        return y * math.log(knee) / knee if y < knee else math.log(y)
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    lin = y < knee
    out[lin] = y[lin] * math.log(knee) / knee
    out[~lin] = np.log(y[~lin])
    return out


def initial_state(frame: LumaFrame, params: SimParams) -> PixelState:
    return PixelState(lin_log(frame.pixels, params.lin_log_knee), frame.t)


def apply_leak(state: PixelState, dt: float, params: SimParams) -> PixelState:
    """Lower every memorized value by ``leak_rate_hz * theta_on * dt``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if params.leak_rate_hz == 0 or dt == 0:
        return state
    return PixelState(state.mem - params.leak_rate_hz * params.theta_on * dt, state.t_last)


def simulate_pair(
    state: PixelState, frame: LumaFrame, params: SimParams
) -> tuple[EventStream, PixelState]:
    """Emit the events between ``state.t_last`` and ``frame.t`` and advance the memory."""
    if frame.pixels.shape != state.mem.shape:
        raise SimulationError(
            f"frame shape {frame.pixels.shape} does not match state shape {state.mem.shape}"
        )
    if frame.t <= state.t_last:
        raise SimulationError(f"frame timestamp {frame.t} does not follow {state.t_last}")

    height, width = state.mem.shape
    delta = lin_log(frame.pixels, params.lin_log_knee) - state.mem
    pos = delta > 0
    theta = np.where(pos, params.theta_on, params.theta_off)
    mag = np.abs(delta)
    n = np.floor(mag / theta + CROSSING_EPS).astype(np.int64)

    sign = np.where(pos, 1, -1)
    new_mem = state.mem + sign * n * theta
    new_state = PixelState(new_mem, frame.t)

    flat_n = n.ravel()
    total = int(flat_n.sum())
    if total == 0:
        return EventStream.empty(width, height), new_state

    active = np.flatnonzero(flat_n)
    counts = flat_n[active]
    # per-pixel quantities are computed on the active pixels and repeated,
    # which is much cheaper than gathering them per event
    # k = 1..n within each run, as a cumulative sum of steps that reset per run
    step = np.ones(total, dtype=np.int32)
    step[np.cumsum(counts[:-1])] = 1 - counts[:-1]
    k = np.cumsum(step, dtype=np.int32)
    frac = k * np.repeat(theta.ravel()[active], counts) / np.repeat(mag.ravel()[active], counts)

    dt = frame.t - state.t_last
    offset = np.minimum(np.rint(dt * frac).astype(np.int64), dt)

    # time order, ties in row-major pixel order (then crossing order); the
    # runs are already pixel-major so a stable sort on the offset suffices
    order = stable_argsort_uint(offset)
    ay, ax = np.divmod(active, width)
    x = np.repeat(ax.astype(np.int32), counts)[order]
    y = np.repeat(ay.astype(np.int32), counts)[order]
    p = np.repeat(sign.ravel()[active].astype(np.int8), counts)[order]
    t = state.t_last + offset[order]
    return EventStream._adopt(width, height, t, x, y, p), new_state


def stable_argsort_uint(keys: np.ndarray) -> np.ndarray:
    """Stable argsort of non-negative integers, 16 bits at a time.

    numpy sorts 16-bit keys with a stable radix sort, which for bounded
    timestamp offsets is several times faster than a general merge sort.
    """
    keys = np.asarray(keys)
    if keys.size == 0:
        return np.zeros(0, dtype=np.intp)
    top = int(keys.max())
    order = np.argsort((keys & 0xFFFF).astype(np.uint16), kind="stable")
    shift = 16
    while top >> shift:
        digit = ((keys[order] >> shift) & 0xFFFF).astype(np.uint16)
        order = order[np.argsort(digit, kind="stable")]
        shift += 16
    return order


def apply_shot_noise(
    t0: int,
    t1: int,
    dims: tuple[int, int],
    params: SimParams,
    rng: np.random.Generator,
    luma: np.ndarray | None = None,
) -> EventStream:
    """Poisson noise events in ``[t0, t1)``.

    ``dims`` is ``(width, height)``. Each pixel and polarity draws a count
    with mean ``shot_noise_rate_hz * (t1 - t0) / 2``; timestamps are
    uniform over the interval.
    """
    if not t0 < t1:
        raise ValueError(f"empty noise interval [{t0}, {t1})")
    width, height = dims
    if params.shot_noise_rate_hz == 0:
        return EventStream.empty(width, height)
    npix = width * height
    rate = params.shot_noise_rate_hz * (t1 - t0) * 1e-6 / 2.0
    if params.shot_noise_dark_scaling and luma is not None:
        lam = rate * (1.0 - np.clip(luma, 0, 255) / 255.0)
        counts = rng.poisson(np.broadcast_to(lam, (2, height, width))).ravel()
        idx = np.repeat(np.arange(counts.size), counts)
    else:
        # uniform rates: one Poisson total spread uniformly over (plane, pixel)
        # has the same distribution as independent per-pixel draws
        idx = np.sort(rng.integers(0, 2 * npix, size=rng.poisson(rate * 2 * npix)))
    total = idx.size
    if total == 0:
        return EventStream.empty(width, height)
    t = rng.integers(t0, t1, size=total, dtype=np.int64)
    polarity_plane, pix = np.divmod(idx, npix)
    # idx is ordered by (polarity plane, pixel); re-sort to (t, pixel, plane)
    by_pix = np.argsort(pix, kind="stable")
    order = by_pix[stable_argsort_uint(t[by_pix] - t0)]
    pix = pix[order]
    y, x = np.divmod(pix, width)
    p = np.where(polarity_plane[order] == 0, 1, -1).astype(np.int8)
    return EventStream._adopt(width, height, t[order], x.astype(np.int32), y.astype(np.int32), p)


def simulate_video(frames: Sequence[LumaFrame], params: SimParams | None = None) -> EventStream:
    """Convert a whole frame sequence into one event stream."""
    params = params or SimParams()
    if len(frames) < 2:
        raise SimulationError("need at least two frames")
    shape = frames[0].pixels.shape
    for i in range(1, len(frames)):
        if frames[i].pixels.shape != shape:
            raise SimulationError(f"frame {i} has shape {frames[i].pixels.shape}, expected {shape}")
        if frames[i].t <= frames[i - 1].t:
            raise SimulationError(
                f"timestamp regression at frame {i}: {frames[i].t} after {frames[i - 1].t}"
            )
    height, width = shape
    rng = np.random.default_rng(params.seed)
    state = initial_state(frames[0], params)
    parts = []
    for prev, frame in zip(frames[:-1], frames[1:]):
        state = apply_leak(state, (frame.t - prev.t) * 1e-6, params)
        ev, state = simulate_pair(state, frame, params)
        nz = None
        if params.shot_noise_rate_hz > 0:
            nz = apply_shot_noise(prev.t, frame.t, (width, height), params, rng, luma=prev.pixels)
        parts.append((ev, nz))
    out = _assemble(parts, width, height)
    logger.debug("simulated %d frames -> %d events", len(frames), len(out))
    return out


def _assemble(parts, width: int, height: int) -> EventStream:
    """Write every (signal, noise) pair into one buffer, merging each pair in place.

    Pairs cover consecutive intervals, so the result is sorted; signal wins
    timestamp ties within a pair.
    """
    n = sum(len(ev) + (len(nz) if nz is not None else 0) for ev, nz in parts)
    out = EventStream.empty(width, height)
    bufs = [np.empty(n, dtype=a.dtype) for a in (out.t, out.x, out.y, out.p)]
    at = 0
    for ev, nz in parts:
        m = len(ev)
        if nz is None or len(nz) == 0:
            for buf, src in zip(bufs, (ev.t, ev.x, ev.y, ev.p)):
                buf[at : at + m] = src
            at += m
            continue
        k = len(nz)
        pos_nz = np.searchsorted(ev.t, nz.t, side="right") + np.arange(k)
        from_ev = np.ones(m + k, dtype=bool)
        from_ev[pos_nz] = False
        for buf, a, b in zip(bufs, (ev.t, ev.x, ev.y, ev.p), (nz.t, nz.x, nz.y, nz.p)):
            view = buf[at : at + m + k]
            view[from_ev] = a
            view[pos_nz] = b
        at += m + k
    return EventStream._adopt(width, height, *bufs)


# ---------------------------------------------------------------- ingestion


def load_params(path: str | Path, base: SimParams | None = None) -> SimParams:
    """Read ``key = value`` lines (``#`` comments) into SimParams."""
    base = base or SimParams()
    types = {f.name: f.type for f in fields(SimParams)}
    updates = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown parameter {key!r}")
        updates[key] = _coerce(types[key], value)
    return replace(base, **updates)


def _coerce(type_name, value: str):
    name = type_name if isinstance(type_name, str) else type_name.__name__
    if name == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if name == "int":
        return int(value)
    return float(value)


def _to_luma(img: np.ndarray, t: int) -> LumaFrame:
    if img.ndim == 2:
        return LumaFrame(t, img.astype(np.float64))
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[..., :3]
    return luma_from_rgb(img, t)


def _natural_key(path: Path):
    return [int(s) if s.isdigit() else s for s in re.split(r"(\d+)", path.name)]


def load_frames(
    source: str | Path,
    fps: float | None = None,
    timestamps: str | Path | None = None,
) -> list[LumaFrame]:
    """Load a video as luma frames.

    ``source`` is either a directory of numbered 8-bit grayscale/RGB images
    or an ``.npz`` file with a ``frames`` array (N x H x W or N x H x W x 3)
    and optionally a ``t`` array of microsecond timestamps. Timestamps are
    taken from, in order, ``timestamps`` (one integer microsecond value per
    line), a ``timestamps.txt`` next to the images, the npz ``t`` array, or
    ``fps``.
    """
    from PIL import Image

    source = Path(source)
    if not source.exists():
        raise FileNotFoundError(source)
    ts: list[int] | None = None
    if source.is_dir():
        images = sorted(
            (p for p in source.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")),
            key=_natural_key,
        )
        if not images:
            raise SimulationError(f"no images in {source}")
        arrays = [np.asarray(Image.open(p)) for p in images]
        if timestamps is None and (source / "timestamps.txt").exists():
            timestamps = source / "timestamps.txt"
    else:
        with np.load(source) as data:
            arrays = list(data["frames"])
            if "t" in data:
                ts = [int(v) for v in data["t"]]
    if timestamps is not None:
        ts = [int(line.split()[0]) for line in Path(timestamps).read_text().splitlines() if line.strip()]
    elif fps is not None and ts is None:
        ts = [int(round(i * 1e6 / fps)) for i in range(len(arrays))]
    if ts is None:
        raise SimulationError("no timestamps: pass fps or a timestamps file")
    if len(ts) != len(arrays):
        raise SimulationError(f"{len(ts)} timestamps for {len(arrays)} frames")
    return [_to_luma(a, t) for a, t in zip(arrays, ts)]
