"""Joint multi-task training: composite loss, linear LR schedule, evaluation, checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .core import Task, binarize
from .decoder import DecoderConfig
from .encoder import coarse_ce, gate_teacher_label
from .metrics import binary_f1, pixel_iou
from .model import Ablation, OmniIML, predict_batch, to_tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "omniiml-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LossWeights:
    mask: float = 1.0
    aux: float = 0.4
    gate: float = 0.5
    det: float = 1.0


@dataclass
class TrainingConfig:
    steps: int = 2000
    batch: int = 4
    input_size: tuple = (512, 512)
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    schedule: str = "linear"
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: Ablation = field(default_factory=Ablation)
    decoder_channels: int = 128
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)
        elif isinstance(self.ablation, str):
            self.ablation = Ablation.preset(self.ablation)
        self.input_size = tuple(self.input_size)
        self.betas = tuple(self.betas)
        if not self.lr_start > self.lr_end > 0:
            raise ValueError(f"need lr_start > lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.schedule != "linear":
            raise ValueError(f"only the linear schedule is supported, got {self.schedule!r}")
        if min(dataclasses.astuple(self.weights)) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **overrides) -> "TrainingConfig":
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if "." in key:
                outer, inner = key.split(".", 1)
                data[outer] = {**data[outer], inner: value}
            else:
                data[key] = value
        return TrainingConfig.from_dict(data)


def load_config(path) -> TrainingConfig:
    """YAML (or JSON, which is valid YAML) key/value document mirroring TrainingConfig."""
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return TrainingConfig.from_dict(data)


def save_config(cfg: TrainingConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def lr_at(step: int, cfg: TrainingConfig) -> float:
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * step / cfg.steps


@dataclass
class LossReport:
    mask_ce: float
    aux_rgb_ce: float
    aux_fused_ce: float
    gate_bce: float
    det_total: float
    total: float
    step: int = 0
    lr: float = 0.0
    fused_fraction: float = 0.0  # share of the batch routed through F_fused

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class NonFiniteLoss(FloatingPointError):
    pass


def build_model(cfg: TrainingConfig) -> OmniIML:
    torch.manual_seed(cfg.seed)
    return OmniIML(cfg.ablation, DecoderConfig(channels=cfg.decoder_channels))


def batch_schedule(n: int, batch: int, seed: int):
    """Endless deterministic stream of index batches: reshuffled epochs, wrap-around batches."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    pending: list[int] = []
    while True:
        while len(pending) < batch:
            pending.extend(rng.permutation(n).tolist())
        yield pending[:batch]
        pending = pending[batch:]


class Trainer:
    def __init__(self, cfg: TrainingConfig, model: OmniIML | None = None):
        self.cfg = cfg
        self.model = model if model is not None else build_model(cfg)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr_start, betas=cfg.betas,
                                           weight_decay=cfg.weight_decay)
        self.step = 0
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.history: list[LossReport] = []

    def losses(self, samples):
        cfg, model = self.cfg, self.model
        images = to_tensor([s.image for s in samples])
        gt = torch.from_numpy(np.stack([s.mask for s in samples])).long()
        heads = model.encoder.heads(images)
        zero = images.new_zeros(())

        aux_rgb = coarse_ce(heads.p_rgb, gt).mean()
        aux_fused = coarse_ce(heads.p_fused, gt).mean() if heads.p_fused is not None else zero
        if model.encoder.modality == "gate":
            route = gate_teacher_label(heads.p_rgb, heads.p_fused, gt)
            gate_bce = F.binary_cross_entropy_with_logits(heads.gate_logit, route.float())
        else:
            route = model.encoder.default_route(heads)
            gate_bce = zero
        out = model.forward_with_route(images, heads, route)
        mask_ce = F.cross_entropy(out.logits, gt)
        if out.ae is not None:
            det = model.detection(out.ae, [s.boxes for s in samples], tuple(images.shape[-2:]),
                                  self.generator).total
        else:
            det = zero
        w = cfg.weights
        total = w.mask * mask_ce + w.aux * (aux_rgb + aux_fused) + w.gate * gate_bce + w.det * det
        report = LossReport(mask_ce.item(), aux_rgb.item(), aux_fused.item(), gate_bce.item(), det.item(),
                            total.item(), step=self.step, fused_fraction=float(route.float().mean()))
        return total, report

    def train_step(self, samples) -> LossReport:
        if self.step >= self.cfg.steps:
            raise RuntimeError(f"training already ran its {self.cfg.steps} steps")
        self.model.train()
        total, report = self.losses(samples)
        if not math.isfinite(report.total):
            raise NonFiniteLoss(f"non-finite loss at step {self.step}: {report.to_dict()}")
        lr = lr_at(self.step, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        for name, p in self.model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteLoss(f"non-finite gradient in {name} at step {self.step}: {report.to_dict()}")
        self.optimizer.step()
        report.lr = lr
        self.step += 1
        self.history.append(report)
        return report

    def fit(self, samples, steps: int | None = None, callback=None, log_every: int = 0):
        """Run `steps` updates (default: the remaining configured steps) over a deterministic order."""
        samples = list(samples)
        if not samples:
            raise ValueError("no training samples")
        steps = self.cfg.steps - self.step if steps is None else steps
        order = batch_schedule(len(samples), self.cfg.batch, self.cfg.seed)
        for _ in range(self.step):  # resume position in the data stream
            next(order)
        reports = []
        for _ in range(steps):
            idx = next(order)
            report = self.train_step([samples[i] for i in idx])
            reports.append(report)
            if log_every and report.step % log_every == 0:
                log.info("step %d lr %.2e total %.4f mask %.4f det %.4f gate %.4f fused %.2f", report.step,
                         report.lr, report.total, report.mask_ce, report.det_total, report.gate_bce,
                         report.fused_fraction)
            if callback is not None and callback(self, report) is False:
                break
        return reports


# ------------------------------------------------------------------ evaluation

def evaluate(model: OmniIML, samples, threshold: float = 0.5, batch_size: int = 8,
             return_details: bool = False) -> dict:
    """Per-task mean IoU/F1 plus the unweighted macro average over the tasks present."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty evaluation set")
    per_task: dict[Task, dict[str, list]] = {}
    details = []
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.image.shape, []).append(i)
    probs: list = [None] * len(samples)
    gates: list = [None] * len(samples)
    for idx in groups.values():
        p, g = predict_batch(model, [samples[i].image for i in idx], batch_size)
        for i, pi, gi in zip(idx, p, g):
            probs[i], gates[i] = pi, gi
    for s, prob, gate in zip(samples, probs, gates):
        pred = binarize(prob, threshold)
        iou, f1 = pixel_iou(pred, s.mask), binary_f1(pred, s.mask)
        slot = per_task.setdefault(s.task, {"iou": [], "f1": []})
        slot["iou"].append(iou)
        slot["f1"].append(f1)
        details.append({"key": s.key, "task": s.task.value, "iou": iou, "f1": f1, "gate_prob": gate})
    report = {}
    for task in Task:
        if task in per_task:
            report[task.value] = {"iou": float(np.mean(per_task[task]["iou"])),
                                  "f1": float(np.mean(per_task[task]["f1"])),
                                  "count": len(per_task[task]["iou"])}
    tasks = [v for k, v in report.items()]
    report["mean"] = {"iou": float(np.mean([t["iou"] for t in tasks])),
                      "f1": float(np.mean([t["f1"] for t in tasks]))}
    if return_details:
        return report, details
    return report


def gate_statistics(details) -> dict:
    """Share of samples per task whose gate chose the fused modality."""
    out = {}
    for d in details:
        if d["gate_prob"] is None:
            continue
        slot = out.setdefault(d["task"], [])
        slot.append(d["gate_prob"] >= 0.5)
    return {task: {"fused": float(np.mean(v)), "count": len(v)} for task, v in out.items()}


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path, model: OmniIML, cfg: TrainingConfig, step: int = 0, extra: dict | None = None) -> Path:
    """npz archive: one array per parameter/buffer keyed by module path, plus a JSON '__meta__' entry."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_name(path.name + ".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "step": step,
            "config": cfg.to_dict(), "extra": extra or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def resolve_checkpoint(path) -> Path:
    path = Path(path)
    if path.exists():
        return path
    alt = path.with_name(path.name + ".npz")
    if alt.exists():
        return alt
    raise FileNotFoundError(f"checkpoint not found: {path}")


def load_checkpoint(path):
    """Returns (model, cfg, meta)."""
    path = resolve_checkpoint(path)
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} archive")
        if int(meta.get("version", 0)) > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {meta['version']} is newer than supported")
        cfg = TrainingConfig.from_dict(meta["config"])
        model = build_model(cfg)
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files if k != "__meta__"}
    model.load_state_dict(state)
    model.eval()
    return model, cfg, meta
