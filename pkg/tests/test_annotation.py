import json

import httpx
import numpy as np
import pytest

from omniiml.annotation import (ArtifactDraft, ClientError, HttpAnnotatorClient, InstanceRecognition,
                                MockAnnotator, PipelineConfig, StepFailure, annotate, annotate_sample, assemble,
                                count_hedges, digest_ocr, echo_draft, parse_title_map, source_of, split_by_source,
                                step1_recognize, step2_describe, step2_prompt, step3_self_examine,
                                write_annotations)
from omniiml.core import Sample, connected_components
from omniiml.prompting import validate_annotation


def make_sample(task="natural", centers=((10, 10), (40, 50)), key="natural_0_00000", size=64, seed=0):
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    mask = np.zeros((size, size), np.uint8)
    for cy, cx in centers:
        mask[cy - 3:cy + 3, cx - 4:cx + 4] = 1
    return Sample(image, mask, task, key=key)


REC = InstanceRecognition("a red object", "Top left", "left of the tree")


def test_step1_non_text_queries_once_per_instance():
    client = MockAnnotator()
    recs = step1_recognize(make_sample(), client)
    assert client.count("step1") == 2 and len(recs) == 2
    assert recs[0].absolute_position == "Top left"
    assert all(isinstance(r, InstanceRecognition) and r.content for r in recs)


def test_step1_text_uses_ocr_only():
    client = MockAnnotator()
    recs = step1_recognize(make_sample("document"), client, ocr=digest_ocr)
    assert client.count() == 0
    assert recs[0].content.startswith("txt-")


def test_step1_records_client_failures_per_instance():
    calls = {"n": 0}

    def flaky(images, prompt, attempt):
        calls["n"] += 1
        if calls["n"] == 1:
            raise ClientError("boom")
        return json.dumps({"content": "thing", "relative_position": "near"})

    recs = step1_recognize(make_sample(), MockAnnotator({"step1": flaky}))
    assert isinstance(recs[0], StepFailure) and recs[0].instance == 1
    assert isinstance(recs[1], InstanceRecognition)


def test_step1_requires_tampering():
    s = Sample(np.zeros((16, 16, 3), np.uint8), np.zeros((16, 16), np.uint8), "natural")
    with pytest.raises(ValueError):
        step1_recognize(s, MockAnnotator())


def canned_two(images, prompt, attempt):
    return 'Sure.\n{"Edge Artifacts": "hard seam", "Lighting Artifacts": "flat shading"}'


def test_step2_parses_canned_reply_and_focuses_prompt():
    client = MockAnnotator({"step2": canned_two})
    draft = step2_describe(make_sample(), REC, 1, client)
    assert len(draft.t_des) == 2
    assert client.count("step2") == 1
    prompt = step2_prompt(REC)
    assert "a red object" in prompt and "Textural" in prompt


def test_step2_retries_once_then_fails():
    client = MockAnnotator({"step2": lambda i, p, a: "I cannot tell."})
    with pytest.raises(ValueError):
        step2_describe(make_sample(), REC, 1, client)
    assert client.count("step2") == 2
    fixed = MockAnnotator({"step2": lambda i, p, a: canned_two(i, p, a) if a else "???"})
    assert len(step2_describe(make_sample(), REC, 1, fixed).t_des) == 2


def test_title_map_parsing():
    assert parse_title_map("Edge Artifacts: hard\n- Lighting Artifacts: flat") == {
        "Edge Artifacts": "hard", "Lighting Artifacts": "flat"}
    assert parse_title_map('x {"a": 1} {"Edge": "seam"}') == {"Edge": "seam"}
    assert parse_title_map("nothing") is None


DRAFT = ArtifactDraft({"Edge Artifacts": "The seam is sharp."})


def test_step3_echo_keeps_draft_unflagged():
    client = MockAnnotator()
    final = step3_self_examine(make_sample(), REC, DRAFT, 1, client)
    assert final == DRAFT and not final.flagged
    assert client.count("step3") == 1


def test_step3_more_hedging_retries_then_flags():
    hedgy = lambda i, p, a: '{"Edge Artifacts": "It might possibly be a seam."}'  # noqa: E731
    client = MockAnnotator({"step3": hedgy})
    final = step3_self_examine(make_sample(), REC, DRAFT, 1, client)
    assert final.flagged and final.t_des == DRAFT.t_des
    assert client.count("step3") == 2


def test_step3_client_failure_falls_back_flagged():
    final = step3_self_examine(make_sample(), REC, DRAFT, 1, MockAnnotator(fail_steps=["step3"]))
    assert final.flagged and final.t_des == DRAFT.t_des


def test_step3_prompt_carries_draft_and_exemplar():
    seen = []
    client = MockAnnotator({"step3": lambda i, p, a: seen.append(p) or echo_draft(p)})
    step3_self_examine(make_sample(), REC, DRAFT, 1, client)
    assert "The seam is sharp." in seen[0] and "Corrected answer" in seen[0]


def test_hedge_counting():
    assert count_hedges("It might be, possibly. It appears to glow.") == 3
    assert count_hedges("The seam is sharp.") == 0


@pytest.mark.parametrize("task,per_instance", [("natural", 3), ("face", 3), ("document", 2), ("scenetext", 2)])
@pytest.mark.parametrize("centers", [((10, 10),), ((10, 10), (40, 50)), ((8, 8), (30, 30), (52, 52))])
def test_query_count_law(task, per_instance, centers):
    client = MockAnnotator()
    sample = make_sample(task, centers)
    result = annotate_sample(sample, client, ocr=digest_ocr)
    m = connected_components(sample.mask).count
    assert m == len(centers)
    assert client.count() == per_instance * m == result.queries
    assert result.ok and len(result.annotation) == m
    validate_annotation(result.annotation.to_list())


def test_pipeline_is_byte_identical_and_order_stable(tmp_path):
    samples = [make_sample(t, key=f"{t}_0_{i:05d}", seed=i) for i, t in enumerate(["natural", "document", "face"])]
    serial = annotate(samples, MockAnnotator(), digest_ocr)
    parallel = annotate(samples, MockAnnotator(), digest_ocr, PipelineConfig(max_workers=4))
    a = [r.annotation.serialize() for r in serial]
    assert a == [r.annotation.serialize() for r in parallel]
    paths = write_annotations(serial, tmp_path / "a")
    again = write_annotations(annotate(samples, MockAnnotator(), digest_ocr), tmp_path / "b")
    assert [p.read_bytes() for p in paths] == [p.read_bytes() for p in again]


def test_assemble_drops_failures_and_splits_by_source():
    good = [make_sample(key=f"natural_{s}_{i:05d}", seed=i) for s in (0, 1) for i in range(2)]
    results = annotate(good, MockAnnotator())
    manifest = assemble(good, results, split_by_source(["natural_1"]))
    assert not manifest.dropped and len(manifest.records) == 4
    assert {r.sample for r in manifest.split("test")} == {"natural_1_00000", "natural_1_00001"}
    assert not {r.sample for r in manifest.split("test")} & {r.sample for r in manifest.split("train")}

    results[1].annotation = None
    results[1].failures.append(StepFailure("step2", 1, "unparseable"))
    results[2].flagged = True
    strict = assemble(good, results, split_by_source([]))
    assert [k for k, _ in strict.dropped] == [good[1].key, good[2].key]
    lenient = assemble(good, results, split_by_source([]), strict=False)
    assert [k for k, _ in lenient.dropped] == [good[1].key]
    assert source_of("document_7_00012") == "document_7"


def test_http_client_multipart_and_audit(tmp_path, monkeypatch):
    seen = {}

    def handler(request: httpx.Request):
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = request.read()
        return httpx.Response(200, json={"text": '{"Edge Artifacts": "seam"}'})

    monkeypatch.setenv("OMNIIML_ANNOTATOR_URL", "http://annotator.test")
    monkeypatch.setenv("OMNIIML_ANNOTATOR_TOKEN", "secret")
    client = HttpAnnotatorClient(transport=httpx.MockTransport(handler), audit_log=tmp_path / "audit.jsonl")
    reply = client.query([np.zeros((16, 16, 3), np.uint8)], "[omniiml:step2:v1] hello")
    assert reply == '{"Edge Artifacts": "seam"}'
    assert seen["auth"] == "Bearer secret"
    assert b"image/png" in seen["body"] and b"hello" in seen["body"]
    log = [json.loads(line) for line in (tmp_path / "audit.jsonl").read_text().splitlines()]
    assert log[0]["response"] == reply


def test_http_client_errors(monkeypatch):
    monkeypatch.delenv("OMNIIML_ANNOTATOR_URL", raising=False)
    with pytest.raises(ClientError):
        HttpAnnotatorClient()
    client = HttpAnnotatorClient("http://x.test", transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    with pytest.raises(ClientError):
        client.query([], "p")
