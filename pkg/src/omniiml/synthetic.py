"""Deterministic synthetic tampered/authentic image families for four IML task flavours.

Every tampered sample is built as an untampered twin plus an edit confined to a
region; the stored mask is exactly the set of pixels where the two differ.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import MANIFEST_FIELDS, Sample, Task, load_manifest, write_image, write_mask
from .frequency import BLOCK, dct_matrix


class TamperKind(str, enum.Enum):
    COPY_MOVE = "copymove"
    SPLICE = "splice"
    ERASE = "erase"


ALL_KINDS = (TamperKind.COPY_MOVE, TamperKind.SPLICE, TamperKind.ERASE)

# standard JPEG luminance table
JPEG_LUMA_Q = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.float64).reshape(8, 8)

MAX_ATTEMPTS = 64


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class GenSpec:
    task: Task
    n: int
    size: tuple = (128, 128)
    tamper_kinds: tuple = ALL_KINDS
    area_frac: tuple = (0.005, 0.15)
    authentic_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task", Task.parse(self.task))
        object.__setattr__(self, "tamper_kinds", tuple(TamperKind(k) for k in self.tamper_kinds))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        lo, hi = self.area_frac
        if not 0 < lo <= hi < 1:
            raise ValueError(f"area_frac must satisfy 0 < min <= max < 1, got {self.area_frac}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 <= self.authentic_ratio <= 1.0:
            raise ValueError("authentic_ratio must lie in [0,1]")
        if not self.tamper_kinds:
            raise ValueError("tamper_kinds must be non-empty")
        if min(self.size) < 16:
            raise ValueError("size must be at least 16x16")

    @classmethod
    def from_dict(cls, data: dict) -> "GenSpec":
        data = dict(data)
        for key in ("size", "area_frac", "tamper_kinds"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "task": self.task.value, "n": self.n, "size": list(self.size),
            "tamper_kinds": [k.value for k in self.tamper_kinds], "area_frac": list(self.area_frac),
            "authentic_ratio": self.authentic_ratio, "seed": self.seed,
        }


# ------------------------------------------------------------------ helpers

def recompress(img: np.ndarray, scale: float) -> np.ndarray:
    """One pass of 8x8 block DCT quantization per channel (a JPEG-like recompression)."""
    d = dct_matrix()
    q = np.maximum(np.round(JPEG_LUMA_Q * scale), 1.0)
    h, w = img.shape[:2]
    ph, pw = (-h) % BLOCK, (-w) % BLOCK
    x = np.pad(img.astype(np.float64), ((0, ph), (0, pw), (0, 0)), mode="edge") - 128.0
    H, W = x.shape[:2]
    blocks = x.reshape(H // 8, 8, W // 8, 8, 3).transpose(0, 2, 4, 1, 3)
    coef = np.einsum("ki,abcij,lj->abckl", d, blocks, d)
    coef = np.round(coef / q) * q
    rec = np.einsum("ki,abckl,lj->abcij", d, coef, d)
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(H, W, 3)[:h, :w] + 128.0
    return np.clip(np.round(rec), 0, 255).astype(np.uint8)


def smooth_noise(rng, h, w, sigma, channels=3):
    field_ = rng.standard_normal((h, w, channels))
    field_ = ndimage.gaussian_filter(field_, sigma=(sigma, sigma, 0))
    return field_ / (field_.std() + 1e-9)


def ellipse_mask(h, w, cy, cx, ry, rx, angle=0.0):
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (dx * c + dy * s) / max(rx, 0.5)
    v = (-dx * s + dy * c) / max(ry, 0.5)
    return (u * u + v * v) <= 1.0


def rect_mask(h, w, y0, x0, y1, x1):
    m = np.zeros((h, w), dtype=bool)
    m[max(y0, 0):min(y1, h), max(x0, 0):min(x1, w)] = True
    return m


def to_u8(x):
    return np.clip(np.round(x), 0, 255).astype(np.uint8)


def force_difference(twin: np.ndarray, edited: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Restore pixels outside region and nudge unchanged pixels inside it by one gray level."""
    out = twin.copy()
    out[region] = edited[region]
    same = region & np.all(out == twin, axis=2)
    if same.any():
        vals = out[same, 0].astype(np.int16)
        out[same, 0] = np.where(vals < 255, vals + 1, vals - 1).astype(np.uint8)
    return out


def _split_area(rng, total, k):
    return rng.dirichlet(np.ones(k) * 2.0) * total


def _target_fraction(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


# ------------------------------------------------------------------ natural

def _natural_background(rng, h, w):
    base = rng.uniform(40, 215, size=3)
    grad = np.linspace(-1, 1, w)[None, :, None] * rng.uniform(-40, 40, size=3)
    grad = grad + np.linspace(-1, 1, h)[:, None, None] * rng.uniform(-40, 40, size=3)
    tex = smooth_noise(rng, h, w, rng.uniform(1.0, 3.0)) * rng.uniform(10, 30)
    img = base + grad + tex
    for _ in range(rng.integers(3, 7)):
        m = ellipse_mask(h, w, rng.uniform(0, h), rng.uniform(0, w), rng.uniform(h / 12, h / 4),
                         rng.uniform(w / 12, w / 4), rng.uniform(0, np.pi))
        shade = rng.uniform(20, 235, size=3) + smooth_noise(rng, h, w, 2.0) * 8
        img = np.where(m[..., None], shade, img)
    img = ndimage.gaussian_filter(img, sigma=(1.0, 1.0, 0))
    return to_u8(img)


def _blob_regions(rng, h, w, fractions):
    regions = []
    for frac in fractions:
        area = frac * h * w
        aspect = rng.uniform(0.6, 1.6)
        ry = np.sqrt(area / np.pi * aspect)
        rx = area / (np.pi * ry)
        cy = rng.uniform(ry, h - ry) if 2 * ry < h else h / 2
        cx = rng.uniform(rx, w - rx) if 2 * rx < w else w / 2
        regions.append((cy, cx, ry, rx, ellipse_mask(h, w, cy, cx, ry, rx)))
    return regions


def _shift_region(rng, h, w, cy, cx, ry, rx):
    for _ in range(16):
        sy = rng.uniform(ry, max(h - ry, ry + 1e-6)) - cy
        sx = rng.uniform(rx, max(w - rx, rx + 1e-6)) - cx
        if abs(sy) > ry or abs(sx) > rx:
            return int(round(sy)), int(round(sx))
    return int(h // 2), int(w // 2)


def _edit_blobs(rng, twin, kinds, regions, palette_fn):
    h, w = twin.shape[:2]
    edited = twin.astype(np.float64).copy()
    region = np.zeros((h, w), dtype=bool)
    for cy, cx, ry, rx, m in regions:
        kind = kinds[rng.integers(len(kinds))]
        if kind == TamperKind.COPY_MOVE:
            sy, sx = _shift_region(rng, h, w, cy, cx, ry, rx)
            src = np.roll(twin, (-sy, -sx), axis=(0, 1)).astype(np.float64)
            edited[m] = src[m]
        elif kind == TamperKind.SPLICE:
            other = palette_fn(rng)
            edited[m] = other[m]
        else:
            ring = ndimage.binary_dilation(m, iterations=3) & ~m
            fill = twin[ring].mean(axis=0) if ring.any() else twin.reshape(-1, 3).mean(axis=0)
            edited[m] = fill + rng.normal(0, 1.0, size=(int(m.sum()), 3))
        region |= m
    return to_u8(edited), region


def _natural(rng, h, w, kinds, fractions):
    twin = _natural_background(rng, h, w)
    if fractions is None:
        edited, region = twin, np.zeros((h, w), dtype=bool)
    else:
        edited, region = _edit_blobs(rng, twin, kinds, _blob_regions(rng, h, w, fractions),
                                     lambda r: _natural_background(r, h, w))
    return _natural_finish(rng, twin, edited, region)


def _natural_finish(rng, twin, edited, region):
    """Shared recompression, then heavy per-image sensor noise, applied to both twin and edit."""
    h, w = twin.shape[:2]
    scale = rng.uniform(0.3, 0.8)
    noise = rng.standard_normal((h, w, 3)) * rng.uniform(4.0, 10.0)
    out = []
    for img in (twin, edited):
        img = recompress(img, scale).astype(np.float64) + noise
        out.append(to_u8(img))
    return out[0], out[1], region


# ------------------------------------------------------------------ document

LINE_H = 12
GLYPH_H = 8


def _glyph_row(rng, width, gray, paper_row):
    """Dark glyph-like rectangles along one text line on top of the given paper strip."""
    row = paper_row.copy()
    x = int(rng.integers(2, 6))
    while x < width - 2:
        gw = int(rng.integers(2, 6))
        if rng.random() < 0.15:
            x += int(rng.integers(3, 7))  # word gap
            continue
        top = int(rng.integers(0, 3))
        bottom = GLYPH_H - int(rng.integers(0, 2))
        pattern = rng.random((bottom - top, gw)) < 0.75
        sub = row[top:bottom, x:x + gw]
        sub[pattern[:, :sub.shape[1]]] = gray
        x += gw + 1
    return row


def _document_page(rng, h, w, gray, margin=4):
    paper = 238.0 + rng.normal(0, 1.5, size=(h, w))
    page = paper.copy()
    lines = []
    y = margin
    while y + LINE_H <= h - margin:
        page[y + 2:y + 2 + GLYPH_H, margin:w - margin] = _glyph_row(
            rng, w - 2 * margin, gray, paper[y + 2:y + 2 + GLYPH_H, margin:w - margin])
        lines.append(y)
        y += LINE_H
    return page, paper, lines


def _text_regions(rng, h, w, lines, fractions, margin=4):
    regions = []
    for frac in fractions:
        area = frac * h * w
        y = lines[int(rng.integers(len(lines)))] if lines else int(rng.integers(0, max(h - LINE_H, 1)))
        rh = min(LINE_H, h - y)
        rw = int(np.clip(round(area / rh), 2, w - 2 * margin))
        x0 = int(rng.integers(margin, max(w - margin - rw, margin) + 1))
        regions.append(rect_mask(h, w, y, x0, y + rh, x0 + rw))
    return regions


def _document(rng, h, w, kinds, fractions):
    gray = rng.uniform(25, 70)
    page, paper, lines = _document_page(rng, h, w, gray)
    scale = rng.uniform(0.4, 0.8)
    twin = recompress(to_u8(np.repeat(page[..., None], 3, axis=2)), scale)
    if fractions is None:
        return twin, twin, np.zeros((h, w), dtype=bool)
    region = np.zeros((h, w), dtype=bool)
    # the edit bypasses recompression: fresh paper grain and glyphs at a slightly shifted gray
    fresh_paper = 238.0 + rng.normal(0, 1.5, size=(h, w))
    alt = fresh_paper.copy()
    for y in lines:
        alt[y + 2:y + 2 + GLYPH_H, 4:w - 4] = _glyph_row(
            rng, w - 8, gray + rng.choice([-1, 1]) * rng.uniform(3, 7), fresh_paper[y + 2:y + 2 + GLYPH_H, 4:w - 4])
    edited = twin.astype(np.float64).copy()
    for m in _text_regions(rng, h, w, lines, fractions):
        kind = kinds[rng.integers(len(kinds))]
        if kind == TamperKind.ERASE:
            src = fresh_paper
        elif kind == TamperKind.COPY_MOVE:
            src = np.roll(page, int(rng.choice([-1, 1])) * LINE_H, axis=0) + rng.normal(0, 0.8, size=(h, w))
        else:
            src = alt
        edited[m] = src[m][:, None]
        region |= m
    return twin, to_u8(edited), region


# ------------------------------------------------------------------ face

def _face_image(rng, h, w, tone=None, grain=None):
    bg = _natural_background(rng, h, w).astype(np.float64)
    cy, cx = h * rng.uniform(0.45, 0.55), w * rng.uniform(0.45, 0.55)
    ry, rx = h * rng.uniform(0.32, 0.42), w * rng.uniform(0.25, 0.33)
    face = ellipse_mask(h, w, cy, cx, ry, rx)
    tone = rng.uniform([150, 100, 80], [235, 190, 160]) if tone is None else tone
    yy, xx = np.mgrid[0:h, 0:w]
    shade = 1.0 - 0.25 * (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    grain = rng.uniform(1.0, 3.0) if grain is None else grain
    skin = tone * shade[..., None] + smooth_noise(rng, h, w, 1.5) * grain
    img = np.where(face[..., None], skin, bg)
    for ex in (-0.4, 0.4):
        eye = ellipse_mask(h, w, cy - 0.25 * ry, cx + ex * rx, 0.08 * ry, 0.15 * rx)
        img[eye] = rng.uniform(20, 60)
    mouth = ellipse_mask(h, w, cy + 0.45 * ry, cx, 0.06 * ry, 0.35 * rx)
    img[mouth] = tone * 0.55
    return to_u8(img), (cy, cx, ry, rx), tone


def _face(rng, h, w, kinds, fractions):
    twin, (cy, cx, ry, rx), tone = _face_image(rng, h, w)
    if fractions is None:
        return twin, twin, np.zeros((h, w), dtype=bool)
    edited = twin.astype(np.float64).copy()
    region = np.zeros((h, w), dtype=bool)
    for frac in fractions:
        area = frac * h * w
        side = np.sqrt(area)
        ph, pw = int(max(2, round(side * rng.uniform(0.8, 1.2)))), 0
        pw = int(max(2, round(area / ph)))
        ph, pw = min(ph, h - 2), min(pw, w - 2)
        y0 = int(np.clip(cy + rng.uniform(-0.6, 0.6) * ry - ph / 2, 0, h - ph))
        x0 = int(np.clip(cx + rng.uniform(-0.6, 0.6) * rx - pw / 2, 0, w - pw))
        m = rect_mask(h, w, y0, x0, y0 + ph, x0 + pw)
        kind = kinds[rng.integers(len(kinds))]
        if kind == TamperKind.SPLICE:
            donor, _, _ = _face_image(rng, h, w, tone=tone * rng.uniform(0.9, 1.1), grain=rng.uniform(0.0, 0.6))
            edited[m] = donor[m]
        elif kind == TamperKind.COPY_MOVE:
            sy, sx = int(rng.integers(-h // 4, h // 4 + 1)), int(rng.integers(-w // 4, w // 4 + 1))
            edited[m] = np.roll(twin, (sy, sx), axis=(0, 1))[m]
        else:
            blurred = ndimage.gaussian_filter(twin.astype(np.float64), sigma=(3, 3, 0))
            edited[m] = blurred[m]
        region |= m
    return twin, to_u8(edited), region


# ------------------------------------------------------------------ scene text

def _scene_strip(rng, h, w, img, y, strip_h, fg, bg, sharp):
    strip = np.tile(bg, (strip_h, w, 1)).astype(np.float64)
    x = int(rng.integers(2, 6))
    while x < w - 4:
        gw = int(rng.integers(2, 5))
        pattern = rng.random((strip_h - 4, gw)) < 0.7
        sub = strip[2:strip_h - 2, x:x + gw]
        sub[pattern[:, :sub.shape[1]]] = fg
        x += gw + int(rng.integers(1, 3))
    if not sharp:
        strip = ndimage.gaussian_filter(strip, sigma=(0.8, 0.8, 0))
    return strip


def _scene_text(rng, h, w, kinds, fractions):
    base = _natural_background(rng, h, w).astype(np.float64)
    base += smooth_noise(rng, h, w, 0.7) * 12
    strips = []
    y = int(rng.integers(4, 12))
    while y + 14 <= h - 4:
        strip_h = int(rng.integers(10, 15))
        fg = rng.uniform(0, 255, size=3)
        bg = 255 - fg + rng.normal(0, 20, size=3)
        base[y:y + strip_h] = _scene_strip(rng, h, w, base, y, strip_h, fg, bg, sharp=False)
        strips.append((y, strip_h, fg, bg))
        y += strip_h + int(rng.integers(6, 20))
    twin = to_u8(base)
    if fractions is None or not strips:
        return twin, twin, np.zeros((h, w), dtype=bool)
    edited = twin.astype(np.float64).copy()
    region = np.zeros((h, w), dtype=bool)
    for frac in fractions:
        y, strip_h, fg, bg = strips[int(rng.integers(len(strips)))]
        area = frac * h * w
        rw = int(np.clip(round(area / strip_h), 2, w - 4))
        x0 = int(rng.integers(2, max(w - 2 - rw, 2) + 1))
        m = rect_mask(h, w, y, x0, y + strip_h, x0 + rw)
        kind = kinds[rng.integers(len(kinds))]
        if kind == TamperKind.ERASE:
            src = np.tile(bg, (h, w, 1)) + rng.normal(0, 2.0, size=(h, w, 3))
        else:
            shifted = fg * rng.uniform(0.85, 1.15) if kind == TamperKind.SPLICE else fg
            src = np.zeros((h, w, 3))
            src[y:y + strip_h] = _scene_strip(rng, h, w, src, y, strip_h, shifted, bg, sharp=True)
        edited[m] = src[m]
        region |= m
    return twin, to_u8(edited), region


_RENDER = {
    Task.NATURAL: _natural,
    Task.DOCUMENT: _document,
    Task.FACE: _face,
    Task.SCENE_TEXT: _scene_text,
}


# ------------------------------------------------------------------ generation

@dataclass(frozen=True)
class GeneratedPair:
    """A sample together with its untampered twin (generator-internal oracle)."""

    sample: Sample
    twin: np.ndarray


def _sample_rng(spec: GenSpec, index: int) -> np.random.Generator:
    task_id = list(Task).index(spec.task)
    return np.random.default_rng(np.random.SeedSequence([spec.seed, task_id, index]))


def _authentic_flags(spec: GenSpec) -> np.ndarray:
    n_auth = int(round(spec.authentic_ratio * spec.n))
    flags = np.zeros(spec.n, dtype=bool)
    order = np.random.default_rng(np.random.SeedSequence([spec.seed, 7919])).permutation(spec.n)
    flags[order[:n_auth]] = True
    return flags


def generate_one(spec: GenSpec, index: int, authentic: bool = False) -> GeneratedPair:
    h, w = spec.size
    lo, hi = spec.area_frac
    total = h * w
    if hi * total < 1 or int(np.floor(hi * total)) < int(np.ceil(lo * total)):
        raise InfeasibleSpec(f"no integer pixel count satisfies area_frac {spec.area_frac} on {h}x{w}")
    rng = _sample_rng(spec, index)
    render = _RENDER[spec.task]
    key = f"{spec.task.value}_{spec.seed}_{index:05d}"
    if authentic:
        twin, _, _ = render(rng, h, w, spec.tamper_kinds, None)
        return GeneratedPair(Sample(twin, np.zeros((h, w), np.uint8), spec.task, key=key), twin)
    max_k = 3 if spec.task.is_text else 2
    for _ in range(MAX_ATTEMPTS):
        k = int(rng.integers(1, max_k + 1))
        frac = _target_fraction(rng, lo, hi)
        fractions = _split_area(rng, frac, k)
        twin, edited, region = render(rng, h, w, spec.tamper_kinds, list(fractions))
        achieved = region.sum() / total
        if not (lo <= achieved <= hi) or not region.any():
            continue
        tampered = force_difference(twin, edited, region)
        mask = np.any(tampered != twin, axis=2).astype(np.uint8)
        return GeneratedPair(Sample(tampered, mask, spec.task, key=key), twin)
    raise InfeasibleSpec(f"could not meet area_frac {spec.area_frac} for {spec.task.value} sample {index}")


def generate_pairs(spec: GenSpec) -> list[GeneratedPair]:
    flags = _authentic_flags(spec)
    return [generate_one(spec, i, bool(flags[i])) for i in range(spec.n)]


def generate(spec: GenSpec) -> list[Sample]:
    return [p.sample for p in generate_pairs(spec)]


def generate_mix(n_per_task: int, size=(128, 128), seed=0, authentic_ratio=0.0, tasks=tuple(Task),
                 **kwargs) -> list[Sample]:
    """Balanced multi-task set: exactly n_per_task samples of every requested task, task-major order."""
    out = []
    for task in tasks:
        out.extend(generate(GenSpec(task, n_per_task, size, seed=seed, authentic_ratio=authentic_ratio,
                                    **kwargs)))
    return out


# ------------------------------------------------------------------ manifest I/O

MANIFEST_SCHEMA = {
    "type": "object",
    "required": list(MANIFEST_FIELDS),
    "properties": {
        "id": {"type": "string"},
        "image_path": {"type": "string"},
        "mask_path": {"type": "string"},
        "task": {"enum": [t.value for t in Task]},
        "authentic": {"type": "boolean"},
    },
}


def write_manifest(samples, directory, name="manifest.jsonl") -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    path = directory / name
    keys = [s.key or f"sample_{i:05d}" for i, s in enumerate(samples)]
    if len(set(keys)) != len(keys):
        keys = [f"{k}_{i:05d}" for i, k in enumerate(keys)]
    with open(path, "w", encoding="utf-8") as fh:
        for key, sample in zip(keys, samples):
            image_rel = f"images/{key}.png"
            mask_rel = f"masks/{key}.png"
            write_image(directory / image_rel, sample.image)
            write_mask(directory / mask_rel, sample.mask)
            record = {"id": key, "image_path": image_rel, "mask_path": mask_rel,
                      "task": sample.task.value, "authentic": bool(sample.authentic)}
            fh.write(json.dumps(record) + "\n")
    return path


__all__ = [
    "GenSpec", "TamperKind", "GeneratedPair", "InfeasibleSpec", "generate", "generate_pairs",
    "generate_one", "generate_mix", "write_manifest", "load_manifest", "recompress", "MANIFEST_SCHEMA",
]
