"""Annotated event-frame datasets: YOLO-style labels, splitting and augmentation.

Boxes are normalized ``(cx, cy, w, h)``. Geometric transforms map pixel
coordinates where the image spans ``[0, W] x [0, H]`` and pixel ``(r, c)``
has its center at ``(c + 0.5, r + 0.5)``; the y axis points down, so a
positive rotation angle turns the picture clockwise on screen.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml
from scipy import ndimage

from .frames import BACKGROUND

CLASS_NAMES = ("person", "car", "pole", "other_vehicle")

# coordinates are snapped to this grid so flips are exact involutions
_COORD_DIGITS = 12


class ClassId(enum.IntEnum):
    PERSON = 0
    CAR = 1
    POLE = 2
    OTHER_VEHICLE = 3

    @property
    def label(self) -> str:
        return CLASS_NAMES[self.value]


class LabelFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        prefix = ""
        if path is not None:
            prefix += f"{path}:"
        if line is not None:
            prefix += f"{line}:"
        super().__init__(f"{prefix} {message}" if prefix else message)


def _q(v: float) -> float:
    return round(float(v), _COORD_DIGITS)


@dataclass(frozen=True)
class NormBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, _q(getattr(self, name)))
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center out of [0, 1]: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size out of (0, 1]: {self}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "NormBox":
        """Box from normalized corners, clamped into the unit square."""
        x0, x1 = sorted((min(max(x0, 0.0), 1.0), min(max(x1, 0.0), 1.0)))
        y0, y1 = sorted((min(max(y0, 0.0), 1.0), min(max(y1, 0.0), 1.0)))
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    @classmethod
    def from_pixels(cls, x0, y0, x1, y1, width: int, height: int) -> "NormBox":
        return cls.from_corners(x0 / width, y0 / height, x1 / width, y1 / height)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        x0, y0, x1, y1 = self.corners
        return x0 * width, y0 * height, x1 * width, y1 * height


@dataclass(frozen=True)
class Annotation:
    cls: ClassId
    box: NormBox

    def __post_init__(self):
        object.__setattr__(self, "cls", ClassId(self.cls))


@dataclass
class DatasetSample:
    """An event-frame image (``(H, W)`` uint8) with its annotations.

    ``provenance`` is empty for original samples; generated samples record
    the transforms applied to ``source_id``.
    """

    sample_id: str
    image: np.ndarray | None
    annotations: list[Annotation] = field(default_factory=list)
    image_path: Path | None = None
    source_id: str | None = None
    provenance: tuple[str, ...] = ()

    def load_image(self) -> np.ndarray:
        if self.image is None:
            from PIL import Image

            self.image = np.asarray(Image.open(self.image_path).convert("L")).copy()
        return self.image

    @property
    def height(self) -> int:
        return self.load_image().shape[0]

    @property
    def width(self) -> int:
        return self.load_image().shape[1]


# ---------------------------------------------------------------- label files


def _parse_box_line(parts: Sequence[str], lineno: int, path) -> tuple[ClassId, NormBox]:
    try:
        cls_val = float(parts[0])
        coords = [float(v) for v in parts[-4:]]
    except ValueError:
        raise LabelFormatError(f"non-numeric field in {' '.join(parts)!r}", lineno, path) from None
    if cls_val != int(cls_val) or int(cls_val) not in ClassId._value2member_map_:
        raise LabelFormatError(f"class {parts[0]} not in 0..3", lineno, path)
    if any(not 0.0 <= c <= 1.0 for c in coords):
        raise LabelFormatError(f"coordinate outside [0, 1] in {' '.join(parts)!r}", lineno, path)
    try:
        box = NormBox(*coords)
    except ValueError as exc:
        raise LabelFormatError(str(exc), lineno, path) from None
    return ClassId(int(cls_val)), box


def parse_label_text(text: str, path=None) -> list[Annotation]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise LabelFormatError(f"expected 'class cx cy w h', got {line!r}", lineno, path)
        cls, box = _parse_box_line(parts, lineno, path)
        out.append(Annotation(cls, box))
    return out


def parse_label_file(path: str | Path) -> list[Annotation]:
    path = Path(path)
    return parse_label_text(path.read_text(), path)


def format_box(box: NormBox) -> str:
    return f"{box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"


def write_label_file(annotations: Sequence[Annotation], path: str | Path) -> None:
    lines = [f"{int(a.cls)} {format_box(a.box)}\n" for a in annotations]
    Path(path).write_text("".join(lines))


# ---------------------------------------------------------------- splitting


def split_dataset(samples: Sequence, ratio: float = 0.75, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle then cut: ``round(ratio * N)`` samples go to train."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    if not samples:
        raise ValueError("cannot split an empty dataset")
    n = len(samples)
    n_train = int(math.floor(ratio * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    train = [samples[i] for i in sorted(perm[:n_train])]
    test = [samples[i] for i in sorted(perm[n_train:])]
    return train, test


# ---------------------------------------------------------------- transforms


def _derived(sample: DatasetSample, image, annotations, step: str) -> DatasetSample:
    return replace(
        sample,
        image=image,
        annotations=annotations,
        image_path=None,
        source_id=sample.source_id or sample.sample_id,
        provenance=sample.provenance + (step,),
    )


def hflip(sample: DatasetSample) -> DatasetSample:
    img = sample.load_image()[:, ::-1].copy()
    anns = [Annotation(a.cls, replace(a.box, cx=1.0 - a.box.cx)) for a in sample.annotations]
    return _derived(sample, img, anns, "hflip")


def warp_image(image: np.ndarray, matrix: np.ndarray, fill: int = BACKGROUND) -> np.ndarray:
    """Apply the 2x2 ``(x, y)`` linear map ``matrix`` about the image center.

    Nearest-neighbour sampling; uncovered output pixels get ``fill``.
    """
    h, w = image.shape
    # scipy maps output (row, col) -> input (row, col), so pass the inverse in (y, x) order
    inv = np.linalg.inv(matrix)
    m_yx = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - m_yx @ center
    return ndimage.affine_transform(
        image, m_yx, offset=offset, order=0, mode="constant", cval=fill, output=image.dtype
    )


def _transform_boxes(
    annotations: Sequence[Annotation], matrix: np.ndarray, width: int, height: int
) -> list[Annotation]:
    out = []
    c = np.array([width / 2.0, height / 2.0])
    for a in annotations:
        x0, y0, x1, y1 = a.box.to_pixels(width, height)
        pts = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]) - c
        moved = pts @ matrix.T + c
        bx0, by0 = np.clip(moved.min(axis=0), 0, [width, height])
        bx1, by1 = np.clip(moved.max(axis=0), 0, [width, height])
        if (bx1 - bx0) * (by1 - by0) < 1.0:
            continue
        out.append(Annotation(a.cls, NormBox.from_pixels(bx0, by0, bx1, by1, width, height)))
    return out


def rotation_matrix(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def shear_matrix(shx: float, shy: float) -> np.ndarray:
    return np.array([[1.0, shx], [shy, 1.0]])


def affine(sample: DatasetSample, matrix: np.ndarray, step: str, fill: int = BACKGROUND) -> DatasetSample:
    img = sample.load_image()
    h, w = img.shape
    out_img = warp_image(img, matrix, fill)
    return _derived(sample, out_img, _transform_boxes(sample.annotations, matrix, w, h), step)


def rotate(sample: DatasetSample, angle: float, fill: int = BACKGROUND) -> DatasetSample:
    if angle == 0:
        return _derived(sample, sample.load_image().copy(), list(sample.annotations), "rotate(0)")
    return affine(sample, rotation_matrix(angle), f"rotate({angle:.6g})", fill)


def shear(sample: DatasetSample, shx: float, shy: float = 0.0, fill: int = BACKGROUND) -> DatasetSample:
    if abs(shx) > 0.3 or abs(shy) > 0.3:
        raise ValueError("shear factors are limited to |s| <= 0.3")
    step = f"shear({shx:.6g},{shy:.6g})"
    if shx == 0 and shy == 0:
        return _derived(sample, sample.load_image().copy(), list(sample.annotations), step)
    return affine(sample, shear_matrix(shx, shy), step, fill)


def crop(sample: DatasetSample, region: NormBox, min_visibility: float = 0.25) -> DatasetSample:
    """Cut ``region`` out of the image (snapped to whole pixels).

    A box survives if the part of it inside the region is at least
    ``min_visibility`` of its original area.
    """
    img = sample.load_image()
    h, w = img.shape
    rx0, ry0, rx1, ry1 = region.to_pixels(w, h)
    px0, py0 = max(0, int(round(rx0))), max(0, int(round(ry0)))
    px1, py1 = min(w, int(round(rx1))), min(h, int(round(ry1)))
    if px1 <= px0 or py1 <= py0:
        raise ValueError(f"degenerate crop region {region}")
    out_img = img[py0:py1, px0:px1].copy()
    cw, ch = px1 - px0, py1 - py0
    anns = []
    for a in sample.annotations:
        x0, y0, x1, y1 = a.box.to_pixels(w, h)
        cx0, cy0 = max(x0, px0), max(y0, py0)
        cx1, cy1 = min(x1, px1), min(y1, py1)
        if cx1 <= cx0 or cy1 <= cy0:
            continue
        if (cx1 - cx0) * (cy1 - cy0) < min_visibility * (x1 - x0) * (y1 - y0):
            continue
        anns.append(
            Annotation(a.cls, NormBox.from_pixels(cx0 - px0, cy0 - py0, cx1 - px0, cy1 - py0, cw, ch))
        )
    step = f"crop({region.cx:.6g},{region.cy:.6g},{region.w:.6g},{region.h:.6g})"
    return _derived(sample, out_img, anns, step)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class PlanStep:
    """One augmentation. ``low``/``high`` bound the transform's parameter:
    the angle for rotate, the shear factor for shear, and the kept fraction
    of each side for crop; hflip ignores them."""

    transform: str
    probability: float = 0.5
    low: float = 0.0
    high: float = 0.0

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}; choose from {sorted(TRANSFORMS)}")
        if not 0 <= self.probability <= 1:
            raise ValueError("probability must lie in [0, 1]")


def _apply_hflip(sample, rng, step):
    return hflip(sample)


def _apply_rotate(sample, rng, step):
    return rotate(sample, rng.uniform(step.low, step.high))


def _apply_shear(sample, rng, step):
    return shear(sample, rng.uniform(step.low, step.high), rng.uniform(step.low, step.high))


def _apply_crop(sample, rng, step):
    fw = rng.uniform(step.low, step.high)
    fh = rng.uniform(step.low, step.high)
    cx = rng.uniform(fw / 2, 1 - fw / 2)
    cy = rng.uniform(fh / 2, 1 - fh / 2)
    return crop(sample, NormBox(cx, cy, fw, fh))


TRANSFORMS: dict[str, Callable] = {
    "hflip": _apply_hflip,
    "rotate": _apply_rotate,
    "shear": _apply_shear,
    "crop": _apply_crop,
}

DEFAULT_PLAN = (
    PlanStep("hflip", 0.5),
    PlanStep("rotate", 0.4, -15.0, 15.0),
    PlanStep("crop", 0.3, 0.6, 0.9),
    PlanStep("shear", 0.3, -0.2, 0.2),
)


def parse_plan(text: str) -> tuple[PlanStep, ...]:
    """Parse ``name:prob[:low:high]`` items separated by commas."""
    steps = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split(":")
        name = parts[0]
        nums = [float(v) for v in parts[1:]]
        if len(nums) not in (0, 1, 3):
            raise ValueError(f"bad plan item {item!r}; expected name:prob[:low:high]")
        prob = nums[0] if nums else 0.5
        low, high = (nums[1], nums[2]) if len(nums) == 3 else (0.0, 0.0)
        steps.append(PlanStep(name, prob, low, high))
    if not steps:
        raise ValueError("empty augmentation plan")
    return tuple(steps)


def augment_dataset(
    train: Sequence[DatasetSample],
    plan: Sequence[PlanStep] = DEFAULT_PLAN,
    multiplier: float = 2.5,
    seed: int = 0,
) -> list[DatasetSample]:
    """Originals followed by generated samples, ``round(multiplier * N)`` in total.

    Generated sample ``i`` transforms original ``i mod N`` with a generator
    seeded from ``(seed, i)``, so individual samples are reproducible on
    their own. Each plan step fires with its probability; if none fires the
    first step with non-zero probability is applied so no copy is verbatim.
    """
    if not train:
        raise ValueError("cannot augment an empty dataset")
    if multiplier < 1:
        raise ValueError("multiplier must be >= 1")
    if not plan:
        raise ValueError("empty augmentation plan")
    n = len(train)
    target = int(math.floor(multiplier * n + 0.5))
    out = list(train)
    fallback = next((s for s in plan if s.probability > 0), plan[0])
    for i in range(target - n):
        rng = random.Random(f"{seed}:{i}")
        sample = train[i % n]
        applied = False
        for step in plan:
            if rng.random() < step.probability:
                sample = TRANSFORMS[step.transform](sample, rng, step)
                applied = True
        if not applied:
            sample = TRANSFORMS[fallback.transform](sample, rng, fallback)
        src = train[i % n].sample_id
        out.append(replace(sample, sample_id=f"{src}_aug{i:05d}", source_id=src))
    return out


# ---------------------------------------------------------------- on-disk layout


def load_dataset(root: str | Path) -> list[DatasetSample]:
    """Read ``images/*.png`` with matching ``labels/*.txt`` (missing label = no boxes)."""
    root = Path(root)
    img_dir, lbl_dir = root / "images", root / "labels"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{img_dir} is not a directory")
    samples = []
    for img in sorted(img_dir.glob("*.png")):
        lbl = lbl_dir / f"{img.stem}.txt"
        anns = parse_label_file(lbl) if lbl.exists() else []
        samples.append(DatasetSample(img.stem, None, anns, image_path=img))
    return samples


def save_dataset(
    root: str | Path,
    splits: dict[str, Sequence[DatasetSample]],
    extra: dict | None = None,
) -> Path:
    """Write images, labels and a ``dataset.yaml`` manifest; returns the manifest path."""
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    manifest = {
        "names": {int(c): c.label for c in ClassId},
        "nc": len(ClassId),
        "path": ".",
    }
    provenance = {}
    for split_name, samples in splits.items():
        ids = []
        for s in samples:
            Image.fromarray(s.load_image(), mode="L").save(root / "images" / f"{s.sample_id}.png")
            write_label_file(s.annotations, root / "labels" / f"{s.sample_id}.txt")
            ids.append(s.sample_id)
            if s.provenance:
                provenance[s.sample_id] = {"source": s.source_id, "transforms": list(s.provenance)}
        manifest[split_name] = ids
    if provenance:
        manifest["provenance"] = provenance
    if extra:
        manifest.update(extra)
    path = root / "dataset.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=True))
    return path
