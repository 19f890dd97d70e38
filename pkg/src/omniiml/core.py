"""Shared domain types, image/mask I/O and connected-component utilities."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

MIN_SIDE = 16

# 8-connectivity
_EIGHT = np.ones((3, 3), dtype=bool)


class Task(str, enum.Enum):
    NATURAL = "natural"
    DOCUMENT = "document"
    FACE = "face"
    SCENE_TEXT = "scenetext"

    @classmethod
    def parse(cls, value: "str | Task") -> "Task":
        if isinstance(value, Task):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "").replace(" ", "")
        for task in cls:
            if task.value == key:
                return task
        raise ValueError(f"unknown task {value!r}")

    @property
    def is_text(self) -> bool:
        return self in (Task.DOCUMENT, Task.SCENE_TEXT)


class BoundingBox(NamedTuple):
    """Pixel box, half-open on the max edges."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def is_valid(self, height: int | None = None, width: int | None = None) -> bool:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            return False
        if self.x_min < 0 or self.y_min < 0:
            return False
        if width is not None and self.x_max > width:
            return False
        if height is not None and self.y_max > height:
            return False
        return True


def as_image(pixels) -> np.ndarray:
    """Validate and return an H x W x 3 uint8 image array (read-only view)."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got shape {arr.shape}")
    if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
        raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {arr.shape[:2]}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.integer) and arr.min() >= 0 and arr.max() <= 255:
            arr = arr.astype(np.uint8)
        else:
            raise ValueError(f"image must be uint8 in [0,255], got {arr.dtype}")
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def as_mask(bits, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate and return an H x W uint8 {0,1} mask (read-only view)."""
    arr = np.asarray(bits)
    if arr.ndim != 2:
        raise ValueError(f"mask must be HxW, got shape {arr.shape}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ValueError(f"mask shape {arr.shape} does not match image {shape}")
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    values = np.unique(arr)
    if not set(values.tolist()) <= {0, 1}:
        raise ValueError(f"mask values must be binary, got {values[:8]}")
    arr = np.array(arr, dtype=np.uint8, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Component:
    pixels: np.ndarray  # (k, 2) array of (row, col)
    box: BoundingBox


@dataclass(frozen=True)
class InstanceSet:
    components: tuple[Component, ...]

    @property
    def count(self) -> int:
        return len(self.components)

    @property
    def boxes(self) -> list[BoundingBox]:
        return [c.box for c in self.components]

    def instance_mask(self, index: int, shape: tuple[int, int]) -> np.ndarray:
        """Mask of a single component, zero-based index."""
        out = np.zeros(shape, dtype=np.uint8)
        px = self.components[index].pixels
        out[px[:, 0], px[:, 1]] = 1
        return out


def connected_components(mask) -> InstanceSet:
    """8-connected foreground components, ordered by their first pixel in raster order."""
    mask = np.asarray(mask)
    labels, count = ndimage.label(mask > 0, structure=_EIGHT)
    if count == 0:
        return InstanceSet(())
    comps = []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_labels = flat[order]
    starts = np.searchsorted(sorted_labels, np.arange(1, count + 1), side="left")
    ends = np.searchsorted(sorted_labels, np.arange(1, count + 1), side="right")
    width = mask.shape[1]
    for lab in range(count):
        idx = order[starts[lab]:ends[lab]]
        rows, cols = np.divmod(idx, width)
        px = np.stack([rows, cols], axis=1)
        box = BoundingBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
        comps.append((int(idx.min()), Component(px, box)))
    comps.sort(key=lambda item: item[0])
    return InstanceSet(tuple(c for _, c in comps))


def boxes_from_mask(mask) -> list[BoundingBox]:
    return connected_components(mask).boxes


def binarize(prob_map, threshold: float = 0.5) -> np.ndarray:
    """bit = 1 iff prob >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    prob = np.asarray(prob_map, dtype=np.float64)
    if not np.all(np.isfinite(prob)):
        raise ValueError("probability map contains non-finite values")
    return (prob >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    mask: np.ndarray
    task: Task
    boxes: tuple[BoundingBox, ...] = field(default=(), compare=False)
    key: str = ""

    def __post_init__(self):
        image = as_image(self.image)
        mask = as_mask(self.mask, image.shape[:2])
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "task", Task.parse(self.task))
        object.__setattr__(self, "boxes", tuple(boxes_from_mask(mask)))

    @property
    def authentic(self) -> bool:
        return not self.mask.any()

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.task == other.task
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
        )

    __hash__ = None


# ---------------------------------------------------------------- I/O

def read_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return as_image(np.asarray(im.convert("RGB")))


def write_image(path, pixels) -> None:
    PILImage.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not set(np.unique(arr).tolist()) <= {0, 255}:
        raise ValueError(f"{path}: serialized mask must hold only 0 and 255")
    return as_mask((arr == 255).astype(np.uint8))


def write_mask(path, bits) -> None:
    arr = np.asarray(bits, dtype=np.uint8) * 255
    PILImage.fromarray(arr, mode="L").save(path, format="PNG")


MANIFEST_FIELDS = ("image_path", "mask_path", "task", "authentic")


def validate_manifest_record(record: dict) -> list[str]:
    errors = []
    if not isinstance(record, dict):
        return ["record is not an object"]
    for name in MANIFEST_FIELDS:
        if name not in record:
            errors.append(f"missing field {name!r}")
    for name in ("image_path", "mask_path"):
        if name in record and not isinstance(record[name], str):
            errors.append(f"{name} must be a string")
    if "authentic" in record and not isinstance(record["authentic"], bool):
        errors.append("authentic must be a boolean")
    if "task" in record:
        try:
            Task.parse(record["task"])
        except ValueError:
            errors.append(f"unknown task {record['task']!r}")
    return errors


def load_manifest(path) -> list[Sample]:
    path = Path(path)
    root = path.parent
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            record = json.loads(line)
            errors = validate_manifest_record(record)
            if errors:
                raise ValueError(f"{path}:{lineno}: " + "; ".join(errors))
            sample = Sample(
                read_image(root / record["image_path"]),
                read_mask(root / record["mask_path"]),
                Task.parse(record["task"]),
                key=record.get("id", Path(record["image_path"]).stem),
            )
            if sample.authentic != record["authentic"]:
                raise ValueError(f"{path}:{lineno}: authentic flag disagrees with mask")
            samples.append(sample)
    return samples
