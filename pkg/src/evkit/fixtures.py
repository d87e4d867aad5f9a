"""Synthetic videos with closed-form ground truth.

Objects are textured rectangles translating at a constant integer velocity
over a dark background. Frame ``k`` is at ``k * dt_us`` and the object's
top-left corner is at ``start + k * velocity``. The texture moves with the
object, so its interior fires events everywhere and an event window shows
the full object rather than only its leading and trailing edges.

Ground truth is written twice: ``labels/frame_XXXXX.txt`` for each source
frame and ``gt/window_XXXXX.txt`` for each event window ``[t_k, t_k+1)``,
which carries the object boxes at frame ``k + 1`` (the brightness the
window's events converge to).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Annotation, ClassId, NormBox, write_label_file

BACKGROUND_LUMA = 20


@dataclass(frozen=True)
class MovingObject:
    cls: ClassId
    size: tuple[int, int]  # (w, h) pixels
    start: tuple[int, int]  # top-left (x, y) at frame 0
    velocity: tuple[int, int]  # pixels per frame

    def position(self, k: int) -> tuple[int, int, int, int]:
        x = self.start[0] + self.velocity[0] * k
        y = self.start[1] + self.velocity[1] * k
        return x, y, x + self.size[0], y + self.size[1]


@dataclass(frozen=True)
class FixtureSpec:
    name: str
    width: int
    height: int
    n_frames: int
    dt_us: int
    objects: tuple[MovingObject, ...]

    @property
    def timestamps(self) -> list[int]:
        return [k * self.dt_us for k in range(self.n_frames)]


FIXTURES = {
    "moving_square": FixtureSpec(
        "moving_square", 128, 96, 41, 10_000,
        (MovingObject(ClassId.CAR, (20, 20), (8, 8), (2, 1)),),
    ),
    "static_scene": FixtureSpec("static_scene", 128, 96, 21, 10_000, ()),
    "two_objects": FixtureSpec(
        "two_objects", 160, 96, 41, 10_000,
        (
            MovingObject(ClassId.CAR, (24, 16), (4, 10), (3, 0)),
            MovingObject(ClassId.PERSON, (8, 24), (148, 60), (-3, 0)),
        ),
    ),
}


def ground_truth(spec: FixtureSpec, k: int) -> list[Annotation]:
    out = []
    for obj in spec.objects:
        x0, y0, x1, y1 = obj.position(k)
        out.append(Annotation(obj.cls, NormBox.from_pixels(x0, y0, x1, y1, spec.width, spec.height)))
    return out


def render_frames(spec: FixtureSpec, seed: int = 0) -> np.ndarray:
    """``(n_frames, H, W)`` uint8 luma video."""
    rng = np.random.default_rng(seed)
    textures = [rng.integers(80, 256, size=(o.size[1], o.size[0]), dtype=np.uint8) for o in spec.objects]
    video = np.full((spec.n_frames, spec.height, spec.width), BACKGROUND_LUMA, dtype=np.uint8)
    for k in range(spec.n_frames):
        for obj, tex in zip(spec.objects, textures):
            x0, y0, x1, y1 = obj.position(k)
            # clip to the sensor; the texture is cut accordingly
            cx0, cy0 = max(x0, 0), max(y0, 0)
            cx1, cy1 = min(x1, spec.width), min(y1, spec.height)
            if cx1 <= cx0 or cy1 <= cy0:
                continue
            video[k, cy0:cy1, cx0:cx1] = tex[cy0 - y0 : cy1 - y0, cx0 - x0 : cx1 - x0]
    return video


def write_fixture(name: str, out_dir: str | Path, seed: int = 0) -> Path:
    from PIL import Image

    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}")
    spec = FIXTURES[name]
    out = Path(out_dir)
    frames_dir, labels_dir, gt_dir = out / "frames", out / "labels", out / "gt"
    for d in (frames_dir, labels_dir, gt_dir):
        d.mkdir(parents=True, exist_ok=True)
    video = render_frames(spec, seed)
    for k, frame in enumerate(video):
        Image.fromarray(frame, mode="L").save(frames_dir / f"frame_{k:05d}.png")
        write_label_file(ground_truth(spec, k), labels_dir / f"frame_{k:05d}.txt")
    for k in range(spec.n_frames - 1):
        write_label_file(ground_truth(spec, k + 1), gt_dir / f"window_{k:05d}.txt")
    (frames_dir / "timestamps.txt").write_text("".join(f"{t}\n" for t in spec.timestamps))
    meta = {
        "name": spec.name,
        "width": spec.width,
        "height": spec.height,
        "n_frames": spec.n_frames,
        "dt_us": spec.dt_us,
        "seed": seed,
        "objects": [
            {"class": int(o.cls), "size": list(o.size), "start": list(o.start), "velocity": list(o.velocity)}
            for o in spec.objects
        ],
    }
    (out / "fixture.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return out
