"""Desk-scale experiments: overfitting sanity run and the multi-seed ablation sweep."""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .synthetic import generate_mix
from .training import Trainer, TrainingConfig, evaluate, gate_statistics

log = logging.getLogger(__name__)

# held-out data never shares a generator seed with training data
HELD_OUT_SEED = 90_000


@dataclass
class OverfitResult:
    reached: bool
    steps: int
    seconds: float
    metrics: dict
    curve: list = field(default_factory=list)  # (step, mean IoU)


def overfit(n_per_task=8, size=(128, 128), max_steps=5000, target=0.9, eval_every=100, seed=0,
            lr_start=1e-4, threads=1) -> OverfitResult:
    """Train on a small fixed set until its mean IoU reaches `target` or the step budget runs out."""
    torch.set_num_threads(threads)
    samples = generate_mix(n_per_task, size, seed=seed)
    cfg = TrainingConfig(steps=max_steps, batch=4, input_size=size, lr_start=lr_start, seed=seed)
    trainer = Trainer(cfg)
    start = time.perf_counter()
    state = {"metrics": None, "reached": False, "curve": []}

    def check(tr, report):
        if tr.step % eval_every and tr.step != max_steps:
            return None
        metrics = evaluate(tr.model, samples, cfg.threshold)
        state["metrics"] = metrics
        state["curve"].append((tr.step, metrics["mean"]["iou"]))
        log.info("overfit step %d mean IoU %.4f", tr.step, metrics["mean"]["iou"])
        if metrics["mean"]["iou"] >= target:
            state["reached"] = True
            return False
        return None

    trainer.fit(samples, callback=check)
    return OverfitResult(state["reached"], trainer.step, time.perf_counter() - start, state["metrics"],
                         state["curve"])


@dataclass(frozen=True)
class SweepConfig:
    variants: tuple = ("full", "wo_dw", "baseline")
    seeds: tuple = (0, 1, 2)
    steps: int = 1500
    batch: int = 4
    lr_start: float = 1e-4
    n_train_per_task: int = 64
    n_test_per_task: int = 64
    size: tuple = (128, 128)
    threads: int = 1


def run_variant(variant: str, seed: int, sweep: SweepConfig, train, test) -> dict:
    torch.set_num_threads(sweep.threads)
    cfg = TrainingConfig(steps=sweep.steps, batch=sweep.batch, input_size=sweep.size, lr_start=sweep.lr_start,
                         ablation=variant, seed=seed)
    start = time.perf_counter()
    trainer = Trainer(cfg)
    trainer.fit(train)
    metrics, details = evaluate(trainer.model, test, cfg.threshold, return_details=True)
    return {"variant": variant, "seed": seed, "metrics": metrics, "gate": gate_statistics(details),
            "seconds": time.perf_counter() - start, "final_loss": trainer.history[-1].total}


def sweep(config: SweepConfig = SweepConfig(), out: str | Path | None = None) -> dict:
    """Every variant x seed on its own seeded training set, scored on one shared held-out set."""
    test = generate_mix(config.n_test_per_task, config.size, seed=HELD_OUT_SEED)
    runs = []
    for seed in config.seeds:
        train = generate_mix(config.n_train_per_task, config.size, seed=seed)
        for variant in config.variants:
            run = run_variant(variant, seed, config, train, test)
            log.info("%s seed %d: mean IoU %.4f (%.0fs)", variant, seed, run["metrics"]["mean"]["iou"],
                     run["seconds"])
            runs.append(run)
            if out is not None:
                _dump(out, config, runs)
    result = {"config": asdict(config), "runs": runs, "summary": summarize(runs)}
    if out is not None:
        _dump(out, config, runs)
    return result


def summarize(runs) -> dict:
    by_variant: dict[str, list] = {}
    for run in runs:
        by_variant.setdefault(run["variant"], []).append(run)
    summary = {}
    for variant, items in by_variant.items():
        ious = [r["metrics"]["mean"]["iou"] for r in items]
        entry = {"median_iou": statistics.median(ious), "ious": ious}
        gates = [r["gate"] for r in items if r["gate"]]
        if gates:
            entry["fused_share"] = {task: statistics.median(g[task]["fused"] for g in gates if task in g)
                                    for task in gates[0]}
        summary[variant] = entry
    return summary


def _dump(out, config, runs):
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"config": asdict(config), "runs": runs, "summary": summarize(runs)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
