"""omniiml command line: gen-data, train, eval, infer, annotate, validate-ann, report."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("omniiml")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1 instead of exiting with 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _size(text: str):
    parts = text.lower().split("x")
    if len(parts) == 1:
        parts = parts * 2
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW or a single integer, got {text!r}") from None
    return h, w


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    from .core import Task
    from .synthetic import GenSpec, generate, generate_mix, write_manifest

    if args.task == "mix":
        samples = generate_mix(args.n, tuple(args.size), seed=args.seed, authentic_ratio=args.authentic_ratio)
    else:
        samples = generate(GenSpec(Task.parse(args.task), args.n, tuple(args.size), seed=args.seed,
                                   authentic_ratio=args.authentic_ratio))
    path = write_manifest(samples, args.out)
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def _load_samples(manifest):
    from .core import load_manifest

    samples = load_manifest(manifest)
    if not samples:
        raise ValueError(f"{manifest}: no samples")
    return samples


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    import torch

    from .synthetic import generate_mix
    from .training import Trainer, TrainingConfig, evaluate, load_config, save_checkpoint, save_config

    torch.set_num_threads(args.threads)
    cfg = load_config(args.config) if args.config else TrainingConfig()
    cfg = cfg.replace(steps=args.steps, seed=args.seed, batch=args.batch, lr_start=args.lr,
                      ablation=args.ablation)
    if args.data:
        train = _load_samples(args.data)
    else:
        train = generate_mix(args.n_per_task, tuple(args.size), seed=cfg.seed)
    val = _load_samples(args.val) if args.val else train

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    trainer = Trainer(cfg)
    eval_every = args.eval_every or cfg.steps
    best = {"iou": -1.0}

    def checkpoint_if_best():
        metrics = evaluate(trainer.model, val, cfg.threshold)
        if metrics["mean"]["iou"] > best["iou"]:
            best.update(iou=metrics["mean"]["iou"], step=trainer.step, metrics=metrics)
            save_checkpoint(out / "best", trainer.model, cfg, trainer.step, extra={"metrics": metrics})
        log.info("step %d mean IoU %.4f (best %.4f)", trainer.step, metrics["mean"]["iou"], best["iou"])
        return metrics

    with open(out / "losses.jsonl", "w", encoding="utf-8") as fh:
        def callback(tr, report):
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
            if tr.step % eval_every == 0 or tr.step == cfg.steps:
                metrics = checkpoint_if_best()
                if args.target_iou is not None and metrics["mean"]["iou"] >= args.target_iou:
                    return False
            return None

        trainer.fit(train, callback=callback, log_every=args.log_every)
    if best["iou"] < 0:
        checkpoint_if_best()
    save_checkpoint(out / "last", trainer.model, cfg, trainer.step)
    _write_json(out / "metrics.json", {**best["metrics"], "step": best["step"]})
    print(json.dumps(best["metrics"]["mean"]))
    return EXIT_OK


def cmd_eval(args) -> int:
    import torch

    from .training import evaluate, gate_statistics, load_checkpoint

    torch.set_num_threads(args.threads)
    model, cfg, _ = load_checkpoint(args.ckpt)
    samples = _load_samples(args.data)
    threshold = cfg.threshold if args.threshold is None else args.threshold
    metrics, details = evaluate(model, samples, threshold, return_details=True)
    gates = gate_statistics(details)
    if gates:
        metrics["gate"] = gates
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", metrics)
    with open(out / "details.jsonl", "w", encoding="utf-8") as fh:
        for d in details:
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    print(json.dumps(metrics["mean"]))
    return EXIT_OK


def cmd_infer(args) -> int:
    import torch

    from .core import binarize, read_image, write_image, write_mask
    from .model import predict
    from .prompting import build_reference_prompt
    from .training import load_checkpoint

    torch.set_num_threads(args.threads)
    model, cfg, _ = load_checkpoint(args.ckpt)
    threshold = cfg.threshold if args.threshold is None else args.threshold
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_path in args.image:
        image_path = Path(image_path)
        image = read_image(image_path)
        prob, gate = predict(model, image)
        mask = binarize(prob, threshold)
        write_mask(out / f"{image_path.stem}_mask.png", mask)
        write_image(out / f"{image_path.stem}_ref.png", build_reference_prompt(image, mask).composite)
        gate_text = "" if gate is None else f" gate(fused)={gate:.3f}"
        print(f"{image_path.name}: {int(mask.sum())} tampered pixels{gate_text}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    from .annotation import (HttpAnnotatorClient, MockAnnotator, PipelineConfig, annotate, assemble,
                             digest_ocr, split_by_source, write_annotations)

    samples = _load_samples(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.client == "mock":
        client = MockAnnotator()
    else:
        client = HttpAnnotatorClient(audit_log=out / "audit.jsonl" if args.audit else None)
    results = annotate(samples, client, ocr=None if args.no_ocr else digest_ocr,
                       cfg=PipelineConfig(max_workers=args.workers))
    write_annotations(results, out / "annotations")
    manifest = assemble(samples, results, split_by_source(args.test_source), strict=not args.lenient)
    (out / "manifest.jsonl").write_text(manifest.to_jsonl(), encoding="utf-8")
    for key, reason in manifest.dropped:
        print(f"dropped {key}: {reason}", file=sys.stderr)
    print(f"annotated {sum(r.ok for r in results)}/{len(results)} tampered samples; "
          f"{len(manifest.records)} records kept")
    return EXIT_OK


def cmd_validate_ann(args) -> int:
    from .prompting import annotation_violations

    bad = 0
    for path in args.files:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            bad += 1
            continue
        violations = annotation_violations(text)
        for v in violations:
            print(f"{path}: {v}")
        bad += bool(violations)
    print(f"{len(args.files) - bad}/{len(args.files)} annotation files valid")
    return EXIT_OK if bad == 0 else EXIT_RUNTIME


def _task_rows(metrics):
    if not isinstance(metrics, dict):
        raise ValueError("metrics JSON must be an object")
    rows = []
    for task, value in metrics.items():
        if task in ("mean", "gate", "step"):
            continue
        if not isinstance(value, dict) or "iou" not in value or "f1" not in value:
            raise ValueError(f"entry {task!r} lacks iou/f1")
        iou, f1 = float(value["iou"]), float(value["f1"])
        if not (math.isfinite(iou) and math.isfinite(f1)):
            raise ValueError(f"entry {task!r} has non-finite scores")
        rows.append((task, iou, f1))
    if not rows:
        raise ValueError("metrics JSON has no per-task entries")
    return rows


def format_table(rows) -> str:
    lines = [f"{'task':<12} {'IoU':>7} {'F1':>7}"]
    lines += [f"{task:<12} {iou:7.4f} {f1:7.4f}" for task, iou, f1 in rows]
    lines.append(f"{'mean':<12} {np.mean([r[1] for r in rows]):7.4f} {np.mean([r[2] for r in rows]):7.4f}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _task_rows(json.loads(Path(args.metrics).read_text(encoding="utf-8")))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_table(rows), encoding="utf-8")

    tasks = [r[0] for r in rows]
    ious = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(1.4 * len(rows) + 2, 3.2))
    ax.bar(tasks, ious, color="#4c72b0")
    mean = float(np.mean(ious))
    ax.axhline(mean, color="#c44e52", linestyle="--", label=f"mean {mean:.3f}")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title(args.title or Path(args.metrics).parent.name or "IoU per task")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out / "report.png", dpi=120)
    plt.close(fig)
    print(format_table(rows), end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = Parser(prog="omniiml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic tamper set and its manifest")
    p.add_argument("--task", default="mix", choices=["mix", "natural", "document", "face", "scenetext"])
    p.add_argument("--n", type=int, required=True, help="samples (per task for --task mix)")
    p.add_argument("--size", type=_size, default=(128, 128), help="HxW, default 128x128")
    p.add_argument("--authentic-ratio", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model, keep the best checkpoint")
    p.add_argument("--config", help="YAML training config")
    p.add_argument("--data", help="training manifest; default: a generated synthetic mix")
    p.add_argument("--val", help="validation manifest; default: the training set")
    p.add_argument("--n-per-task", type=int, default=8)
    p.add_argument("--size", type=_size, default=(128, 128))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float, help="starting learning rate")
    p.add_argument("--ablation", choices=["full", "wo_mg", "wo_mg_star", "wo_dwd", "wo_dw", "wo_ae", "baseline"])
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--target-iou", type=float, help="stop once the validation mean IoU reaches this")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="per-task IoU/F1 of a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="predict masks and reference prompts for images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--threshold", type=float)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("annotate", parents=[common],
                       help="run the three-step annotation pipeline over a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--client", choices=["mock", "http"], default="mock",
                   help="http reads OMNIIML_ANNOTATOR_URL / OMNIIML_ANNOTATOR_TOKEN")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-ocr", action="store_true", help="query the client for text images too")
    p.add_argument("--lenient", action="store_true", help="keep annotations flagged by self-examination")
    p.add_argument("--test-source", action="append", default=[],
                   help="source family (key without its index) assigned to the test split; repeatable")
    p.add_argument("--audit", action="store_true", help="log http requests/responses to audit.jsonl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("validate-ann", parents=[common],
                       help="check annotation JSON files against the four-key schema")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_validate_ann)

    p = sub.add_parser("report", parents=[common], help="bar chart and table from an eval metrics.json")
    p.add_argument("--metrics", required=True)
    p.add_argument("--title")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"omniiml {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
