"""Datasets: YOLO-format annotations, PPM images, 70/15/15 splits, and a
deterministic synthetic traffic-sign generator for desk-scale runs."""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .images import PPMError, bilinear_resize, read_ppm

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


class AnnotationError(ValueError):
    pass


class SplitMix64:
    """64-bit splitmix generator; tiny, seedable, identical on every platform."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next()
            if v < limit:
                return v % n


class YoloBox(NamedTuple):
    class_id: int
    cx: float
    cy: float
    w: float
    h: float


@dataclass
class LabeledExample:
    image: np.ndarray
    class_id: int
    bbox: tuple[float, float, float, float] | None = None
    source_path: str = ""


@dataclass
class DatasetSplit:
    train: list[LabeledExample]
    val: list[LabeledExample]
    test: list[LabeledExample]
    seed: int
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


def stack(examples: Sequence[LabeledExample]) -> tuple[np.ndarray, np.ndarray]:
    """Examples -> (images (N, H, W, 3), labels (N,))."""
    if not examples:
        raise ValueError("no examples to stack")
    images = np.stack([e.image for e in examples]).astype(np.float64)
    labels = np.array([e.class_id for e in examples], dtype=np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# YOLO TXT annotations

_FIELDS = ("cx", "cy", "w", "h")


def parse_yolo_txt(line: str, line_no: int = 1) -> YoloBox:
    """Parse ``"class cx cy w h"`` with normalized coordinates."""
    parts = line.split()
    if len(parts) != 5:
        raise AnnotationError(
            f"line {line_no}: expected 5 fields (class cx cy w h), got {len(parts)}"
        )
    try:
        class_id = int(parts[0])
    except ValueError:
        raise AnnotationError(f"line {line_no}: class id {parts[0]!r} is not an integer") from None
    if class_id < 0:
        raise AnnotationError(f"line {line_no}: negative class id {class_id}")
    coords = []
    for name, tok in zip(_FIELDS, parts[1:]):
        try:
            v = float(tok)
        except ValueError:
            raise AnnotationError(f"line {line_no}: {name} {tok!r} is not a number") from None
        if not 0.0 <= v <= 1.0:
            raise AnnotationError(f"line {line_no}: {name}={v} outside [0, 1]")
        coords.append(v)
    return YoloBox(class_id, *coords)


def format_yolo_line(box: YoloBox, precision: int = 6) -> str:
    coords = " ".join(f"{v:.{precision}f}" for v in box[1:])
    return f"{box.class_id} {coords}\n"


def read_yolo_file(path: str | os.PathLike) -> list[YoloBox]:
    boxes = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    boxes.append(parse_yolo_txt(line, i))
                except AnnotationError as exc:
                    raise AnnotationError(f"{path}: {exc}") from None
    return boxes


# ---------------------------------------------------------------------------
# Splitting and resizing


def split_sizes(n: int) -> tuple[int, int, int]:
    """70:15:15, val and test rounded half up, train takes the remainder."""
    held = (15 * n + 50) // 100
    return n - 2 * held, held, held


def split_examples(examples: Sequence[LabeledExample], seed: int) -> tuple[list, list, list]:
    """Fisher-Yates shuffle driven by SplitMix64, then cut at 70/15/15."""
    order = list(range(len(examples)))
    rng = SplitMix64(seed)
    for i in range(len(order) - 1, 0, -1):
        j = rng.below(i + 1)
        order[i], order[j] = order[j], order[i]
    n_train, n_val, _ = split_sizes(len(order))
    shuffled = [examples[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train:n_train + n_val],
        shuffled[n_train + n_val:],
    )


def resize_stretch(image: np.ndarray, target_resolution: int) -> np.ndarray:
    """Non-aspect-preserving bilinear resize to target x target."""
    if target_resolution < 2:
        raise ValueError(f"target resolution must be >= 2, got {target_resolution}")
    return bilinear_resize(image, target_resolution, target_resolution)


def load_dataset(
    images_dir: str | os.PathLike,
    labels_dir: str | os.PathLike,
    num_classes: int,
    seed: int,
    resolution: int | None = None,
    class_names: Sequence[str] | None = None,
) -> DatasetSplit:
    """Load ``images/*.ppm`` with matching ``labels/*.txt`` and split 70/15/15.

    Each image is labelled with its first annotation's class. Images with no
    annotation file are skipped with a warning; empty annotation files mark
    background-only images, which are also skipped.
    """
    images_dir, labels_dir = Path(images_dir), Path(labels_dir)
    examples = []
    discarded = 0
    for img_path in sorted(images_dir.glob("*.ppm"), key=lambda p: p.stem):
        label_path = labels_dir / f"{img_path.stem}.txt"
        if not label_path.exists():
            warnings.warn(f"no annotation for {img_path.name}; skipped", stacklevel=2)
            continue
        boxes = read_yolo_file(label_path)
        if not boxes:
            log.debug("%s is background-only; skipped", img_path.name)
            continue
        discarded += len(boxes) - 1
        first = boxes[0]
        if first.class_id >= num_classes:
            raise AnnotationError(
                f"{label_path}: class {first.class_id} out of range for {num_classes} classes"
            )
        try:
            image = read_ppm(img_path)
        except (OSError, PPMError) as exc:
            raise PPMError(f"cannot read {img_path}: {exc}") from exc
        if resolution is not None:
            image = resize_stretch(image, resolution)
        examples.append(
            LabeledExample(image, first.class_id, tuple(first[1:]), str(img_path))
        )
    if discarded:
        warnings.warn(
            f"{discarded} extra annotations discarded (first annotation labels each image)",
            stacklevel=2,
        )
    train, val, test = split_examples(examples, seed)
    names = list(class_names) if class_names else [f"class_{i}" for i in range(num_classes)]
    return DatasetSplit(train, val, test, seed, names)


# ---------------------------------------------------------------------------
# Synthetic signs

SHAPES = ("disk", "triangle", "octagon", "rect")
COLORS = {
    "red": (0.85, 0.1, 0.1),
    "blue": (0.1, 0.25, 0.85),
    "yellow": (0.95, 0.85, 0.1),
    "green": (0.1, 0.7, 0.2),
}
MAX_SYNTH_CLASSES = 29


def glyph_spec(class_id: int) -> tuple[str, str, str, int]:
    """(shape, color, bar orientation, bar count) for a synthetic class.

    Shape and color are paired so that each block of 16 classes has distinct
    (shape, color); the bar orientation separates the two blocks.
    """
    s = class_id % 4
    q = (class_id // 4) % 4
    color = tuple(COLORS)[(q + s) % 4]
    orient = "h" if class_id < 16 else "v"
    return SHAPES[s], color, orient, 1 + class_id % 3


def synth_class_names(num_classes: int) -> list[str]:
    return [
        "{}_{}_{}{}".format(color, shape, orient, bars)
        for shape, color, orient, bars in map(glyph_spec, range(num_classes))
    ]


def _shape_mask(shape: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "triangle":
        # apex up; three half-planes
        k = np.sqrt(3.0)
        return (dy <= 0.5 * r) & (k * dx - dy <= r) & (-k * dx - dy <= r)
    if shape == "octagon":
        return (np.maximum(np.abs(dx), np.abs(dy)) <= 0.92 * r) & (
            np.abs(dx) + np.abs(dy) <= 1.3 * r
        )
    return (np.abs(dx) <= 0.9 * r) & (np.abs(dy) <= 0.62 * r)


def render_sign(class_id: int, resolution: int, rng: np.random.Generator) -> np.ndarray:
    shape, color, orient, bars = glyph_spec(class_id)
    res = resolution
    yy, xx = np.mgrid[0:res, 0:res] + 0.5

    # smooth background: random base color plus a linear ramp
    base = rng.uniform(0.15, 0.6, size=3)
    ramp = rng.uniform(-0.15, 0.15, size=3)
    t = (yy / res)[..., None]
    image = np.clip(base + ramp * t, 0.0, 1.0) * np.ones((res, res, 3))

    cy = res / 2 + rng.uniform(-0.08, 0.08) * res
    cx = res / 2 + rng.uniform(-0.08, 0.08) * res
    r = rng.uniform(0.28, 0.38) * res
    dy, dx = yy - cy, xx - cx
    mask = _shape_mask(shape, dy, dx, r)
    fill = np.clip(np.array(COLORS[color]) + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
    image[mask] = fill

    # digit-like bars inside the glyph
    along = dy if orient == "h" else dx
    across = dx if orient == "h" else dy
    thick = 0.09 * r
    offsets = (np.arange(bars) - (bars - 1) / 2) * 0.32 * r
    bar = np.zeros_like(mask)
    for off in offsets:
        bar |= (np.abs(along - off) <= thick) & (np.abs(across) <= 0.45 * r)
    ink = 0.05 if color == "yellow" else 0.97
    image[bar & mask] = ink

    image += rng.normal(0.0, 0.02, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def synth_signs(num_classes: int, per_class: int, resolution: int = 32, seed: int = 0) -> DatasetSplit:
    """Render ``num_classes * per_class`` sign images and split them 70/15/15."""
    if not 2 <= num_classes <= MAX_SYNTH_CLASSES:
        raise ValueError(f"num_classes must be in [2, {MAX_SYNTH_CLASSES}], got {num_classes}")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(per_class):
        for c in range(num_classes):
            examples.append(
                LabeledExample(render_sign(c, resolution, rng), c, source_path=f"synth:{c}:{i}")
            )
    train, val, test = split_examples(examples, seed)
    return DatasetSplit(train, val, test, seed, synth_class_names(num_classes))
