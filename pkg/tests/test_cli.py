import json

import numpy as np
import pytest
from PIL import Image

from omniiml.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, format_table, run


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["train", "--n-per-task", "1", "--size", "64x64", "--steps", "4", "--batch", "2",
                "--seed", "3", "--out", str(root / "run")]) == EXIT_OK
    return root / "run"


def test_exit_codes(tmp_path, capsys):
    assert run(["gen-data", "--n", "2", "--bogus", "1", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err
    assert run(["no-such-command"]) == EXIT_USAGE
    assert run([]) == EXIT_USAGE
    assert run(["--help"]) == EXIT_OK
    assert run(["eval", "--ckpt", str(tmp_path / "missing"), "--data", str(tmp_path / "m.jsonl"),
                "--out", str(tmp_path / "e")]) == EXIT_RUNTIME


def test_gen_data_writes_one_line_per_sample(tmp_path):
    assert run(["gen-data", "--task", "document", "--n", "16", "--seed", "7", "--out", str(tmp_path / "d")]) == 0
    lines = (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 16
    assert {json.loads(line)["task"] for line in lines} == {"document"}


def test_train_twice_with_same_seed_is_identical(tmp_path):
    (tmp_path / "c.yaml").write_text("steps: 200\nbatch: 2\nseed: 11\ninput_size: [64, 64]\n")
    outputs = []
    for name in ("a", "b"):
        argv = ["train", "--config", str(tmp_path / "c.yaml"), "--n-per-task", "1", "--size", "64x64",
                "--steps", "200", "--out", str(tmp_path / name)]
        assert run(argv) == EXIT_OK
        outputs.append((tmp_path / name / "metrics.json").read_bytes())
    assert outputs[0] == outputs[1]
    assert (tmp_path / "a" / "losses.jsonl").read_bytes() == (tmp_path / "b" / "losses.jsonl").read_bytes()


def test_eval_is_reproducible(trained, tmp_path):
    assert run(["gen-data", "--n", "1", "--size", "64x64", "--out", str(tmp_path / "d")]) == 0
    for name in ("a", "b"):
        assert run(["eval", "--ckpt", str(trained / "best"), "--data", str(tmp_path / "d" / "manifest.jsonl"),
                    "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert (tmp_path / "a" / "details.jsonl").read_bytes() == (tmp_path / "b" / "details.jsonl").read_bytes()


def test_infer_writes_binary_mask_and_reference(trained, tmp_path, rng):
    img = rng.integers(0, 256, (48, 80, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "x.png")
    assert run(["infer", "--ckpt", str(trained / "best"), "--image", str(tmp_path / "x.png"),
                "--out", str(tmp_path / "y")]) == EXIT_OK
    mask = np.asarray(Image.open(tmp_path / "y" / "x_mask.png"))
    ref = np.asarray(Image.open(tmp_path / "y" / "x_ref.png"))
    assert mask.shape == (48, 80) and set(np.unique(mask)) <= {0, 255}
    # wider than tall: the composite stacks vertically
    assert ref.shape == (96, 80, 3)
    np.testing.assert_array_equal(ref[:48], img)
    expected = (img.astype(np.uint16) + mask[..., None]) // 2
    np.testing.assert_array_equal(ref[48:], expected.astype(np.uint8))


def write_metrics(path, tasks):
    path.write_text(json.dumps({t: {"iou": 0.1 * (i + 1), "f1": 0.2 * (i + 1)} for i, t in enumerate(tasks)}
                               | {"mean": {"iou": 0.25, "f1": 0.5}}))


def test_report_four_tasks(tmp_path):
    write_metrics(tmp_path / "m.json", ["natural", "document", "face", "scenetext"])
    assert run(["report", "--metrics", str(tmp_path / "m.json"), "--out", str(tmp_path / "r")]) == EXIT_OK
    table = (tmp_path / "r" / "report.txt").read_text().splitlines()
    assert table[0].split() == ["task", "IoU", "F1"]
    assert [line.split()[0] for line in table[1:]] == ["natural", "document", "face", "scenetext", "mean"]
    assert table[-1].split()[1:] == ["0.2500", "0.5000"]
    assert Image.open(tmp_path / "r" / "report.png").size[0] > 0


def test_report_bars_and_mean_line(tmp_path, monkeypatch):
    import matplotlib.axes

    calls = {}
    orig_bar, orig_axhline = matplotlib.axes.Axes.bar, matplotlib.axes.Axes.axhline

    def bar(self, x, height, *a, **k):
        calls["bars"] = list(height)
        return orig_bar(self, x, height, *a, **k)

    def axhline(self, y=0, *a, **k):
        calls["mean"] = y
        return orig_axhline(self, y, *a, **k)

    monkeypatch.setattr(matplotlib.axes.Axes, "bar", bar)
    monkeypatch.setattr(matplotlib.axes.Axes, "axhline", axhline)
    write_metrics(tmp_path / "m.json", ["natural", "document", "face", "scenetext"])
    assert run(["report", "--metrics", str(tmp_path / "m.json"), "--out", str(tmp_path / "r")]) == EXIT_OK
    assert len(calls["bars"]) == 4
    assert calls["mean"] == pytest.approx(0.25)


@pytest.mark.parametrize("content", ["{}", "[]", "not json", '{"natural": {"iou": 0.5}}', '{"mean": {"iou": 1, "f1": 1}}'])
def test_report_rejects_empty_or_malformed(tmp_path, content):
    (tmp_path / "m.json").write_text(content)
    assert run(["report", "--metrics", str(tmp_path / "m.json"), "--out", str(tmp_path / "r")]) == EXIT_RUNTIME


def test_format_table_mean_row():
    text = format_table([("a", 0.5, 0.6), ("b", 1.0, 1.0)])
    assert text.splitlines()[-1].split() == ["mean", "0.7500", "0.8000"]


def test_validate_ann(tmp_path):
    good = {"Tampered Region": "a", "Absolute Position": "center", "Relative Position": "b",
            "Artifacts": {"Edge Artifacts": "c"}}
    (tmp_path / "good.json").write_text(json.dumps([good]))
    (tmp_path / "bad.json").write_text(json.dumps([{"Tampered Region": "a"}]))
    assert run(["validate-ann", str(tmp_path / "good.json")]) == EXIT_OK
    assert run(["validate-ann", str(tmp_path / "good.json"), str(tmp_path / "bad.json")]) == EXIT_RUNTIME


def test_annotate_with_mock_client(tmp_path):
    assert run(["gen-data", "--n", "2", "--size", "64x64", "--authentic-ratio", "0.5", "--seed", "2",
                "--out", str(tmp_path / "d")]) == 0
    out = tmp_path / "ann"
    assert run(["annotate", "--data", str(tmp_path / "d" / "manifest.jsonl"), "--workers", "2",
                "--out", str(out)]) == EXIT_OK
    files = sorted((out / "annotations").glob("*.json"))
    assert files
    assert run(["validate-ann", *map(str, files)]) == EXIT_OK
    assert (out / "manifest.jsonl").read_text().count("\n") == 8
