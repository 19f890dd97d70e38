"""Three-step chain-of-thoughts annotation against a pluggable annotator client.

Step 1 recognizes each tampered instance (OCR for text images, one client query
otherwise), step 2 asks for a focused artifact description per instance, step 3
asks the annotator to examine and clean its own draft. Results are committed in
instance order so the output does not depend on scheduling.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from PIL import Image as PILImage

from .core import Sample, connected_components
from .prompting import (
    ArtifactAnnotation,
    AnnotationError,
    build_highlight,
    grid_cell,
    validate_annotation,
)

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "v1"
DEFAULT_HEDGES = ("might", "possibly", "appears to", "perhaps", "may be", "could be", "seems",
                  "hard to say", "not sure", "likely")

ENV_URL = "OMNIIML_ANNOTATOR_URL"
ENV_TOKEN = "OMNIIML_ANNOTATOR_TOKEN"


@lru_cache(maxsize=None)
def load_resource(name: str) -> str:
    return resources.files("omniiml").joinpath("resources", name).read_text(encoding="utf-8")


def perspectives() -> list[str]:
    return [line for line in load_resource(f"perspectives.{TEMPLATE_VERSION}.txt").splitlines() if line.strip()]


def exemplar() -> dict:
    return json.loads(load_resource(f"step3_exemplar.{TEMPLATE_VERSION}.json"))


# ------------------------------------------------------------------ clients

class AnnotatorClient(Protocol):
    name: str
    deterministic: bool

    def query(self, images: Sequence[np.ndarray], prompt: str) -> str: ...


class ClientError(RuntimeError):
    pass


def image_digest(images: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for img in images:
        arr = np.ascontiguousarray(img)
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


_CONTENT_WORDS = ("a red object", "a printed word", "a face region", "a patch of texture", "a sign",
                  "a line of text", "an elliptical object", "a cheek area")
_RELATIVE_WORDS = ("left of the central object", "below the title line", "next to the larger shape",
                   "inside the second text line", "above the lower edge")
_ARTIFACT_TEXT = {
    "Textural Artifacts": "The grain inside the region is finer than the surrounding area.",
    "Edge Artifacts": "The boundary is sharper than neighbouring edges and shows a thin halo.",
    "Lighting Artifacts": "The shading does not follow the light direction of the scene.",
    "Geometric Artifacts": "The region is slightly misaligned with the surrounding layout.",
    "Semantic Artifacts": "The content does not fit the context of the rest of the image.",
}


class MockAnnotator:
    """Deterministic in-process annotator keyed on (image digest, prompt).

    `overrides` maps a step tag ("step1", "step2", "step3") to a callable
    (images, prompt, attempt) -> str replacing the canned reply for that step.
    """

    name = "mock"
    deterministic = True

    def __init__(self, overrides: dict | None = None, fail_steps: Sequence[str] = ()):
        self.overrides = dict(overrides or {})
        self.fail_steps = set(fail_steps)
        self.calls: list[dict] = []
        self._lock = threading.Lock()

    @staticmethod
    def step_of(prompt: str) -> str:
        m = re.search(r"\[omniiml:(step\d):", prompt)
        return m.group(1) if m else "unknown"

    def query(self, images, prompt):
        step = self.step_of(prompt)
        key = hashlib.sha256((image_digest(images) + prompt).encode("utf-8")).digest()
        with self._lock:
            attempt = sum(1 for c in self.calls if c["key"] == key)
            self.calls.append({"step": step, "key": key})
        if step in self.fail_steps:
            raise ClientError(f"mock failure in {step}")
        if step in self.overrides:
            return self.overrides[step](images, prompt, attempt)
        seed = int.from_bytes(key[:8], "little")
        if step == "step1":
            return json.dumps({"content": _CONTENT_WORDS[seed % len(_CONTENT_WORDS)],
                               "relative_position": _RELATIVE_WORDS[(seed >> 8) % len(_RELATIVE_WORDS)]})
        if step == "step2":
            titles = sorted(_ARTIFACT_TEXT)
            first = titles[seed % len(titles)]
            second = titles[(seed >> 8) % len(titles)]
            picked = sorted({first, second})
            return json.dumps({t: _ARTIFACT_TEXT[t] for t in picked})
        if step == "step3":
            return echo_draft(prompt)
        return ""

    def count(self, step: str | None = None) -> int:
        with self._lock:
            return sum(1 for c in self.calls if step is None or c["step"] == step)


def echo_draft(prompt: str) -> str:
    m = re.search(r"<<<DRAFT\n(.*?)\nDRAFT>>>", prompt, flags=re.S)
    return m.group(1) if m else ""


class HttpAnnotatorClient:
    """Text+image completion endpoint: POST {base_url}/annotate with multipart images and a prompt.

    The endpoint replies either with JSON {"text": ...} or with plain text. Every
    request/response pair can be appended to a JSONL audit log.
    """

    deterministic = False

    def __init__(self, base_url: str | None = None, token: str | None = None, timeout: float = 120.0,
                 audit_log: str | os.PathLike | None = None, transport=None, name: str = "http"):
        import httpx

        base_url = base_url or os.environ.get(ENV_URL)
        if not base_url:
            raise ClientError(f"no annotator endpoint configured (set {ENV_URL})")
        token = token if token is not None else os.environ.get(ENV_TOKEN)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.name = name
        self._client = httpx.Client(base_url=base_url, headers=headers, timeout=timeout, transport=transport)
        self._audit = Path(audit_log) if audit_log else None
        self._lock = threading.Lock()

    def query(self, images, prompt):
        import httpx

        files = [("images", (f"image_{i}.png", png_bytes(img), "image/png")) for i, img in enumerate(images)]
        try:
            resp = self._client.post("/annotate", data={"prompt": prompt}, files=files)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise ClientError(f"annotator request failed: {exc}") from exc
        if resp.headers.get("content-type", "").startswith("application/json"):
            body = resp.json()
            text = body.get("text", "") if isinstance(body, dict) else str(body)
        else:
            text = resp.text
        if self._audit is not None:
            with self._lock, open(self._audit, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"prompt": prompt, "images": image_digest(images), "response": text}) + "\n")
        return text

    def close(self):
        self._client.close()


# ------------------------------------------------------------------ OCR stand-in

OcrFn = Callable[[np.ndarray], str]


def digest_ocr(crop: np.ndarray) -> str:
    """Deterministic OCR stand-in for synthetic glyphs: a short token derived from the crop pixels."""
    return "txt-" + hashlib.sha1(np.ascontiguousarray(crop).tobytes()).hexdigest()[:8]


# ------------------------------------------------------------------ records

@dataclass(frozen=True)
class InstanceRecognition:
    content: str
    absolute_position: str
    relative_position: str

    def __post_init__(self):
        if not self.content:
            raise ValueError("recognized content must be non-empty")


@dataclass(frozen=True)
class ArtifactDraft:
    t_des: dict
    flagged: bool = False

    def __post_init__(self):
        if not self.t_des:
            raise ValueError("artifact draft must be non-empty")

    def to_json(self) -> str:
        return json.dumps(self.t_des, ensure_ascii=False, sort_keys=True)


@dataclass(frozen=True)
class StepFailure:
    step: str
    instance: int  # 1-based
    message: str


@dataclass
class AnnotationResult:
    key: str
    annotation: ArtifactAnnotation | None
    failures: list = field(default_factory=list)
    flagged: bool = False
    queries: int = 0

    @property
    def ok(self) -> bool:
        return self.annotation is not None and not self.failures


@dataclass(frozen=True)
class PipelineConfig:
    hedging_markers: tuple = DEFAULT_HEDGES
    max_workers: int = 1


def count_hedges(text: str, markers=DEFAULT_HEDGES) -> int:
    low = text.lower()
    return sum(len(re.findall(r"\b" + re.escape(m) + r"\b", low)) for m in markers)


def parse_title_map(raw: str) -> dict | None:
    """First JSON object of string -> string in the text; falls back to 'Title: description' lines."""
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", raw):
        try:
            value, _ = decoder.raw_decode(raw, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict) and value and all(isinstance(k, str) and isinstance(v, str)
                                                     for k, v in value.items()):
            return value
    pairs = {}
    for line in raw.splitlines():
        m = re.match(r"\s*[-*]?\s*([A-Z][\w /-]*Artifacts?)\s*:\s*(.+)", line)
        if m:
            pairs[m.group(1).strip()] = m.group(2).strip()
    return pairs or None


# ------------------------------------------------------------------ steps

def _instance_views(sample: Sample, instances, n: int):
    return [sample.image, build_highlight(sample.image, instances, n).image]


def _centroid(component):
    px = component.pixels
    return float(px[:, 0].mean()) + 0.5, float(px[:, 1].mean()) + 0.5


def step1_recognize(sample: Sample, client: AnnotatorClient, ocr: OcrFn | None = None, instances=None):
    """One InstanceRecognition (or StepFailure) per tampered instance, in instance order."""
    instances = instances or connected_components(sample.mask)
    if instances.count == 0:
        raise ValueError("step 1 needs a tampered sample")
    out = []
    use_ocr = sample.task.is_text and ocr is not None
    for n, comp in enumerate(instances.components, 1):
        cy, cx = _centroid(comp)
        absolute = grid_cell(cy, cx, sample.height, sample.width)
        box = comp.box
        try:
            if use_ocr:
                content = ocr(sample.image[box.y_min:box.y_max, box.x_min:box.x_max])
                line = ocr(sample.image[box.y_min:box.y_max, :])
                relative = f'within the text line "{line}"'
            else:
                raw = client.query(_instance_views(sample, instances, n), load_resource(
                    f"step1_recognize.{TEMPLATE_VERSION}.txt"))
                content, relative = _parse_step1(raw)
            out.append(InstanceRecognition(content, absolute, relative))
        except Exception as exc:  # per-instance failures are recorded, the pipeline goes on
            out.append(StepFailure("step1", n, str(exc)))
    return out


def _parse_step1(raw: str):
    m = re.search(r"\{.*\}", raw, flags=re.S)
    if m:
        try:
            obj = json.loads(m.group(0))
            if isinstance(obj, dict) and obj.get("content"):
                return str(obj["content"]).strip(), str(obj.get("relative_position", "")).strip()
        except json.JSONDecodeError:
            pass
    text = raw.strip()
    if not text:
        raise ValueError("empty recognition response")
    return text, ""


def step2_prompt(rec: InstanceRecognition) -> str:
    return load_resource(f"step2_describe.{TEMPLATE_VERSION}.txt").format(
        content=rec.content, absolute_position=rec.absolute_position,
        relative_position=rec.relative_position or "unknown",
        perspectives="\n".join(f"- {p}" for p in perspectives()))


def step2_describe(sample: Sample, rec: InstanceRecognition, n: int, client: AnnotatorClient, instances=None):
    """ArtifactDraft for instance n; an unparseable reply is retried once."""
    instances = instances or connected_components(sample.mask)
    views = _instance_views(sample, instances, n)
    prompt = step2_prompt(rec)
    for attempt in range(2):
        raw = client.query(views, prompt)
        parsed = parse_title_map(raw)
        if parsed:
            return ArtifactDraft(parsed)
    raise ValueError("step 2 reply could not be parsed after one retry")


def step3_prompt(rec: InstanceRecognition, draft: ArtifactDraft) -> str:
    ex = exemplar()
    return load_resource(f"step3_examine.{TEMPLATE_VERSION}.txt").format(
        content=rec.content, absolute_position=rec.absolute_position,
        relative_position=rec.relative_position or "unknown", draft=draft.to_json(),
        bad_example=json.dumps(ex["unconfident"], indent=2), good_example=json.dumps(ex["corrected"], indent=2))


def step3_self_examine(sample: Sample, rec: InstanceRecognition, draft: ArtifactDraft, n: int,
                       client: AnnotatorClient, instances=None, markers=DEFAULT_HEDGES) -> ArtifactDraft:
    """Cleaned draft. More hedging than the draft (or no usable reply) -> one retry, then the draft, flagged."""
    instances = instances or connected_components(sample.mask)
    views = _instance_views(sample, instances, n)
    prompt = step3_prompt(rec, draft)
    baseline = count_hedges(" ".join(draft.t_des.values()), markers)
    for attempt in range(2):
        try:
            raw = client.query(views, prompt)
        except Exception as exc:
            log.warning("step 3 client failure on instance %d: %s; keeping draft", n, exc)
            return ArtifactDraft(draft.t_des, flagged=True)
        parsed = parse_title_map(raw)
        if parsed and count_hedges(" ".join(parsed.values()), markers) <= baseline:
            return ArtifactDraft(parsed)
    log.warning("step 3 reply on instance %d was not cleaner than the draft; keeping draft", n)
    return ArtifactDraft(draft.t_des, flagged=True)


def _annotate_instance(sample, rec, n, client, instances, cfg):
    if isinstance(rec, StepFailure):
        return None, [rec], False
    try:
        draft = step2_describe(sample, rec, n, client, instances)
    except Exception as exc:
        return None, [StepFailure("step2", n, str(exc))], False
    final = step3_self_examine(sample, rec, draft, n, client, instances, cfg.hedging_markers)
    item = {"Tampered Region": rec.content, "Absolute Position": rec.absolute_position,
            "Relative Position": rec.relative_position or "unknown", "Artifacts": dict(final.t_des)}
    return item, [], final.flagged


def annotate_sample(sample: Sample, client: AnnotatorClient, ocr: OcrFn | None = None,
                    cfg: PipelineConfig = PipelineConfig()) -> AnnotationResult:
    instances = connected_components(sample.mask)
    before = client.count() if hasattr(client, "count") else 0
    recs = step1_recognize(sample, client, ocr, instances)
    jobs = list(enumerate(recs, 1))
    if cfg.max_workers > 1:
        with ThreadPoolExecutor(cfg.max_workers) as pool:
            done = list(pool.map(lambda job: _annotate_instance(sample, job[1], job[0], client, instances, cfg),
                                 jobs))
    else:
        done = [_annotate_instance(sample, rec, n, client, instances, cfg) for n, rec in jobs]
    items, failures, flagged = [], [], False
    for item, fails, flag in done:
        failures.extend(fails)
        flagged |= flag
        if item is not None:
            items.append(item)
    annotation = None
    if items and not failures:
        try:
            annotation = validate_annotation(items)
        except AnnotationError as exc:
            failures.append(StepFailure("schema", 0, str(exc)))
    queries = (client.count() - before) if hasattr(client, "count") else 0
    return AnnotationResult(sample.key, annotation, failures, flagged, queries)


def annotate(samples, client: AnnotatorClient, ocr: OcrFn | None = None,
             cfg: PipelineConfig = PipelineConfig()) -> list[AnnotationResult]:
    return [annotate_sample(s, client, ocr, cfg) for s in samples if not s.authentic]


# ------------------------------------------------------------------ assembly

@dataclass(frozen=True)
class ManifestRecord:
    sample: str
    annotation: str | None
    split: str


@dataclass
class DatasetManifest:
    records: list
    dropped: list = field(default_factory=list)  # (key, reason)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"sample": r.sample, "annotation": r.annotation, "split": r.split}) + "\n"
                       for r in self.records)


def source_of(key: str) -> str:
    """Generator family of a sample key: everything before the trailing index."""
    return key.rsplit("_", 1)[0] if "_" in key else key


def split_by_source(test_sources: Sequence[str]):
    test = set(test_sources)
    return lambda sample: "test" if source_of(sample.key) in test else "train"


def assemble(samples, results, split_rule, strict: bool = True, annotation_ref=None) -> DatasetManifest:
    """Keep samples with valid annotations (and, when strict, no step-3 flag); assign splits."""
    by_key = {r.key: r for r in results}
    annotation_ref = annotation_ref or (lambda key: f"annotations/{key}.json")
    records, dropped = [], []
    for sample in samples:
        split = split_rule(sample)
        if split not in ("train", "test"):
            raise ValueError(f"split rule returned {split!r}")
        if sample.authentic:
            records.append(ManifestRecord(sample.key, None, split))
            continue
        res = by_key.get(sample.key)
        reason = None
        if res is None:
            reason = "no annotation"
        elif res.annotation is None or res.failures:
            reason = "annotation failed: " + "; ".join(f.message for f in res.failures)
        elif strict and res.flagged:
            reason = "self-examination fallback flagged"
        if reason:
            log.info("dropping %s: %s", sample.key, reason)
            dropped.append((sample.key, reason))
            continue
        records.append(ManifestRecord(sample.key, annotation_ref(sample.key), split))
    return DatasetManifest(records, dropped)


def write_annotations(results, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for res in results:
        if res.annotation is None:
            continue
        path = directory / f"{res.key}.json"
        path.write_text(res.annotation.serialize(indent=2) + "\n", encoding="utf-8")
        paths.append(path)
    return paths
