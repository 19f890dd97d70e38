"""Reference visual prompts and the structured artifact-annotation schema."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .core import InstanceSet, as_image, as_mask

KEY_REGION = "Tampered Region"
KEY_ABSOLUTE = "Absolute Position"
KEY_RELATIVE = "Relative Position"
KEY_ARTIFACTS = "Artifacts"
ITEM_KEYS = (KEY_REGION, KEY_ABSOLUTE, KEY_RELATIVE, KEY_ARTIFACTS)

ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
_ROW_WORDS = {"top": "top", "upper": "top", "middle": "middle", "center": "middle", "centre": "middle",
              "bottom": "bottom", "lower": "bottom"}
_COL_WORDS = {"left": "left", "center": "center", "centre": "center", "middle": "center", "right": "right"}


class Layout(enum.Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"


@dataclass(frozen=True)
class ReferencePrompt:
    composite: np.ndarray
    reference: np.ndarray
    layout: Layout


@dataclass(frozen=True)
class HighlightMask:
    image: np.ndarray
    instance_index: int  # 1-based


def reference_image(image, mask) -> np.ndarray:
    """floor((I + 255 * M) / 2) per channel."""
    image = as_image(image)
    mask = as_mask(mask, image.shape[:2])
    m = mask.astype(np.uint16)[..., None] * 255
    return ((image.astype(np.uint16) + m) // 2).astype(np.uint8)


def build_reference_prompt(image, mask) -> ReferencePrompt:
    """Input and highlighted reference side by side (H >= W) or stacked (H < W); input comes first."""
    if isinstance(image, ReferencePrompt):
        raise TypeError("a reference prompt cannot be used as the input image")
    image = as_image(image)
    ref = reference_image(image, mask)
    h, w = image.shape[:2]
    if h >= w:
        return ReferencePrompt(np.concatenate([image, ref], axis=1), ref, Layout.HORIZONTAL)
    return ReferencePrompt(np.concatenate([image, ref], axis=0), ref, Layout.VERTICAL)


def build_highlight(image, instances: InstanceSet, n: int) -> HighlightMask:
    if not 1 <= n <= instances.count:
        raise IndexError(f"instance index {n} outside [1, {instances.count}]")
    image = as_image(image)
    single = instances.instance_mask(n - 1, image.shape[:2])
    return HighlightMask(reference_image(image, single), n)


# ------------------------------------------------------------------ positions

def grid_cell(cy: float, cx: float, height: int, width: int) -> str:
    """Nine-cell position name for a point, e.g. 'Top left'."""
    row = ROWS[min(int(3 * cy / height), 2)]
    col = COLS[min(int(3 * cx / width), 2)]
    return f"{row.capitalize()} {col}"


def normalize_position(text: str) -> str | None:
    """Map free text like 'Top left of the image' onto the nine-cell vocabulary, or None."""
    words = re.findall(r"[a-z]+", str(text).lower())
    row = col = None
    for word in words:
        if row is None and word in ("top", "upper", "bottom", "lower"):
            row = _ROW_WORDS[word]
        elif col is None and word in ("left", "right"):
            col = _COL_WORDS[word]
    centreish = any(w in ("center", "centre", "middle") for w in words)
    if row is None and col is None and not centreish:
        return None
    row = row or "middle"
    col = col or "center"
    return f"{row.capitalize()} {col}"


# ------------------------------------------------------------------ schema

@dataclass(frozen=True)
class ArtifactItem:
    tampered_region: str
    absolute_position: str
    relative_position: str
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {KEY_REGION: self.tampered_region, KEY_ABSOLUTE: self.absolute_position,
                KEY_RELATIVE: self.relative_position, KEY_ARTIFACTS: dict(self.artifacts)}


@dataclass(frozen=True)
class ArtifactAnnotation:
    items: tuple

    def to_list(self) -> list:
        return [item.to_dict() for item in self.items]

    def serialize(self, indent=None) -> str:
        return json.dumps(self.to_list(), ensure_ascii=False, indent=indent)

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class Violation:
    index: int | None
    key: str | None
    message: str

    def __str__(self):
        where = "document" if self.index is None else f"item {self.index}"
        return f"{where}" + (f", key {self.key!r}" if self.key else "") + f": {self.message}"


class AnnotationError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class UnparseableOutput(AnnotationError):
    pass


def annotation_violations(doc) -> list[Violation]:
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            return [Violation(None, None, f"invalid JSON: {exc.msg}")]
    if not isinstance(doc, list):
        return [Violation(None, None, f"expected a list of items, got {type(doc).__name__}")]
    if not doc:
        return [Violation(None, None, "annotation must contain at least one item")]
    out = []
    for i, item in enumerate(doc):
        if not isinstance(item, dict):
            out.append(Violation(i, None, f"item must be an object, got {type(item).__name__}"))
            continue
        for key in ITEM_KEYS:
            if key not in item:
                out.append(Violation(i, key, "missing key"))
        for key in item:
            if key not in ITEM_KEYS:
                out.append(Violation(i, key, "unexpected key"))
        for key in (KEY_REGION, KEY_ABSOLUTE, KEY_RELATIVE):
            if key in item and not isinstance(item[key], str):
                out.append(Violation(i, key, f"expected a string, got {type(item[key]).__name__}"))
        if isinstance(item.get(KEY_ABSOLUTE), str) and normalize_position(item[KEY_ABSOLUTE]) is None:
            out.append(Violation(i, KEY_ABSOLUTE, f"{item[KEY_ABSOLUTE]!r} is not a nine-cell grid position"))
        if KEY_ARTIFACTS in item:
            arts = item[KEY_ARTIFACTS]
            if not isinstance(arts, dict):
                out.append(Violation(i, KEY_ARTIFACTS, f"expected a map of title -> description, "
                                                       f"got {type(arts).__name__}"))
            elif not arts:
                out.append(Violation(i, KEY_ARTIFACTS, "artifact map is empty"))
            else:
                for title, desc in arts.items():
                    if not isinstance(desc, str):
                        out.append(Violation(i, KEY_ARTIFACTS, f"description for {title!r} is not a string"))
    return out


def validate_annotation(doc) -> ArtifactAnnotation:
    """Parse and check a structured annotation; raises AnnotationError listing every violation."""
    violations = annotation_violations(doc)
    if violations:
        raise AnnotationError(violations)
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    items = tuple(
        ArtifactItem(d[KEY_REGION], d[KEY_ABSOLUTE], d[KEY_RELATIVE], dict(d[KEY_ARTIFACTS])) for d in doc
    )
    return ArtifactAnnotation(items)


def extract_json_array(raw: str):
    decoder = json.JSONDecoder()
    for match in re.finditer(r"\[", raw):
        try:
            value, _ = decoder.raw_decode(raw, match.start())
        except json.JSONDecodeError:
            continue
        if isinstance(value, list):
            return value
    raise UnparseableOutput([Violation(None, None, "no JSON array found in model output")])


def parse_model_output(raw: str) -> ArtifactAnnotation:
    return validate_annotation(extract_json_array(raw))
