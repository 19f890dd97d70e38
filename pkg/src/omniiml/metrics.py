"""Localization metrics (pixel IoU, binary F1) and interpretation text metrics."""

from __future__ import annotations

import enum
import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class TextMetric(str, enum.Enum):
    ROUGE_L = "rouge_l"
    BLEU = "bleu"
    MRB = "mrb"
    OCR_ACC = "ocr_acc"
    CHOICE_ACC = "choice_acc"
    COS_SIM = "cos_sim"


@dataclass(frozen=True)
class TextScore:
    metric: TextMetric
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.metric} score out of range: {self.value}")


@dataclass(frozen=True)
class PixelCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def pixel_counts(pred, gt) -> PixelCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return PixelCounts(tp, fp, fn, pred.size - tp - fp - fn)


def pixel_iou(pred, gt) -> float:
    """tp / (tp + fp + fn); 1.0 when both masks are empty."""
    c = pixel_counts(pred, gt)
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def binary_f1(pred, gt) -> float:
    """2tp / (2tp + fp + fn); 1.0 when both masks are empty."""
    c = pixel_counts(pred, gt)
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


# ------------------------------------------------------------------ text

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str | Sequence[str]) -> list[str]:
    """Lowercase and split on non-alphanumerics. Token lists pass through unchanged."""
    if isinstance(text, str):
        return _TOKEN.findall(text.lower())
    return list(text)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def rouge_n(candidate, reference, n: int = 2) -> float:
    """n-gram overlap F1, reported alongside ROUGE-L."""
    cand, ref = _ngrams(tokenize(candidate), n), _ngrams(tokenize(reference), n)
    if not cand or not ref:
        return 0.0
    overlap = sum((cand & ref).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / sum(cand.values()), overlap / sum(ref.values())
    return 2 * p * r / (p + r)


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Sentence BLEU, uniform weights, brevity penalty.

    A precision with zero matches is replaced by 1 / (count + 1) (add-one on that order only).
    """
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        total = sum(c.values())
        matches = sum((c & r).values())
        if matches == 0:
            matches, total = 1, total + 1
        log_p += math.log(matches / total) / max_n
    bp = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_p)


def mrb(candidate, reference) -> float:
    """Mean of ROUGE-L and BLEU."""
    return (rouge_l(candidate, reference) + bleu(candidate, reference)) / 2.0


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ocr_accuracy(pred: str, gt: str) -> float:
    """max(0, 1 - edit_distance / max(|gt|, 1)) at character level."""
    return max(0.0, 1.0 - levenshtein(pred, gt) / max(len(gt), 1))


def normalize_choice(text: str) -> str:
    return " ".join(str(text).strip().casefold().split())


def choice_accuracy(preds, gts, mode: str = "single", strict: bool = False) -> float:
    """single: exact-match ratio. multi: mean per-sample Jaccard, or exact set match when strict."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gts)} references")
    if not gts:
        return 0.0
    if mode == "single":
        hits = [normalize_choice(p) == normalize_choice(g) for p, g in zip(preds, gts)]
        return sum(hits) / len(hits)
    if mode != "multi":
        raise ValueError(f"mode must be 'single' or 'multi', got {mode!r}")
    scores = []
    for p, g in zip(preds, gts):
        ps, gs = {normalize_choice(x) for x in p}, {normalize_choice(x) for x in g}
        if strict:
            scores.append(float(ps == gs))
        elif not ps and not gs:
            scores.append(1.0)
        else:
            scores.append(len(ps & gs) / len(ps | gs))
    return sum(scores) / len(scores)


class HashEmbedder:
    """Deterministic token -> vector table seeded by a hash of the token."""

    def __init__(self, dim: int = 64, salt: str = ""):
        self.dim = dim
        self.salt = salt
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.sha256((self.salt + token).encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.dim)
            self._cache[token] = vec
        return vec


def load_word_vectors(path) -> Callable[[str], np.ndarray]:
    """Read a whitespace-separated word-vector text file (word v1 v2 ...); unknown words map to zeros."""
    table = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split()
            if len(parts) < 2:
                continue
            try:
                vec = np.array([float(x) for x in parts[1:]])
            except ValueError:
                continue  # header line
            dim = dim or len(vec)
            if len(vec) == dim:
                table[parts[0]] = vec
    if dim is None:
        raise ValueError(f"{path}: no vectors found")
    zero = np.zeros(dim)
    return lambda tok: table.get(tok, zero)


def cosine_sim(text_a, text_b, embedder: Callable[[str], np.ndarray] | None = None) -> float:
    """(1 + cos(mean_a, mean_b)) / 2; 0.5 when either mean vector is zero."""
    embedder = embedder or HashEmbedder()
    a, b = tokenize(text_a), tokenize(text_b)
    if not a or not b:
        return 0.5
    va = np.mean([embedder(t) for t in a], axis=0)
    vb = np.mean([embedder(t) for t in b], axis=0)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.5
    cos = float(np.clip(va @ vb / (na * nb), -1.0, 1.0))
    return (1.0 + cos) / 2.0


# ------------------------------------------------------------------ corpus-level

def evaluate_text_corpus(records, embedder=None) -> dict:
    """Mean scores over records of {id, prediction, reference}."""
    records = list(records)
    if not records:
        raise ValueError("empty corpus")
    keys = ("rouge_l", "rouge_2", "bleu", "mrb", "cos_sim")
    sums = dict.fromkeys(keys, 0.0)
    for rec in records:
        p, r = rec["prediction"], rec["reference"]
        sums["rouge_l"] += rouge_l(p, r)
        sums["rouge_2"] += rouge_n(p, r, 2)
        sums["bleu"] += bleu(p, r)
        sums["mrb"] += mrb(p, r)
        sums["cos_sim"] += cosine_sim(p, r, embedder)
    return {"count": len(records), **{k: v / len(records) for k, v in sums.items()}}


def evaluate_mask_corpus(pairs) -> dict:
    """Mean IoU/F1 over (pred_mask, gt_mask) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty corpus")
    ious = [pixel_iou(p, g) for p, g in pairs]
    f1s = [binary_f1(p, g) for p, g in pairs]
    return {"count": len(pairs), "iou": float(np.mean(ious)), "f1": float(np.mean(f1s))}


# ------------------------------------------------------------------ fine-grained interpretation

INTERPRETATION_FIELDS = ("region", "absolute", "relative", "artifact_titles", "artifact_text")


def score_interpretation(raw: str, reference, text_task: bool = False, embedder=None) -> dict:
    """Per-field scores of a raw model reply against a reference annotation.

    Items are paired by index; unmatched items score 0. A reply that does not
    parse into a valid annotation scores 0 on every field.
    """
    from .prompting import AnnotationError, normalize_position, parse_model_output, validate_annotation

    ref = reference if hasattr(reference, "items") else validate_annotation(reference)
    try:
        pred = parse_model_output(raw)
    except AnnotationError:
        return {**dict.fromkeys(INTERPRETATION_FIELDS, 0.0), "cos_sim": 0.0, "parsed": False}
    sums = dict.fromkeys(INTERPRETATION_FIELDS + ("cos_sim",), 0.0)
    n = max(len(pred.items), len(ref.items))
    for p, r in zip(pred.items, ref.items):
        if text_task:
            sums["region"] += ocr_accuracy(p.tampered_region, r.tampered_region)
        else:
            sums["region"] += mrb(p.tampered_region, r.tampered_region)
        sums["absolute"] += float(normalize_position(p.absolute_position) == normalize_position(r.absolute_position))
        sums["relative"] += mrb(p.relative_position, r.relative_position)
        sums["artifact_titles"] += choice_accuracy([list(p.artifacts)], [list(r.artifacts)], mode="multi")
        p_text, r_text = " ".join(p.artifacts.values()), " ".join(r.artifacts.values())
        sums["artifact_text"] += mrb(p_text, r_text)
        sums["cos_sim"] += cosine_sim(p_text, r_text, embedder)
    return {**{k: v / n for k, v in sums.items()}, "parsed": True}
