"""Vision/frequency perception heads, modal gate routing and the multi-scale backbone."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .frequency import HEAD_CHANNELS, FrequencyHead, dct_tokens

STAGE_WIDTHS = (32, 64, 128, 256)
STAGE_STRIDES = (4, 8, 16, 32)


class Modality(enum.Enum):
    FUSED = 1
    VISION_ONLY = 0


@dataclass(frozen=True)
class GateDecision:
    choice: Modality
    probability: float  # probability of FUSED

    @classmethod
    def from_probability(cls, p: float) -> "GateDecision":
        p = float(p)
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability out of range: {p}")
        return cls(Modality.FUSED if p >= 0.5 else Modality.VISION_ONLY, p)


def conv_gn(cin, cout, stride=1, groups=8):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(min(groups, cout), cout),
        nn.ReLU(inplace=True),
    )


def normalize_images(images: torch.Tensor) -> torch.Tensor:
    return images / 127.5 - 1.0


class VisionHead(nn.Module):
    def __init__(self, out_channels=HEAD_CHANNELS):
        super().__init__()
        self.layers = nn.Sequential(
            conv_gn(3, out_channels, stride=2),
            conv_gn(out_channels, out_channels, stride=2),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
        )

    def forward(self, images):
        return self.layers(normalize_images(images))


class Fuse(nn.Module):
    """F_fused = conv3x3(concat(F_rgb, F_freq))."""

    def __init__(self, channels=HEAD_CHANNELS):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def forward(self, f_rgb, f_freq):
        if f_rgb.shape[-2:] != f_freq.shape[-2:]:
            raise ValueError(f"spatial mismatch {tuple(f_rgb.shape[-2:])} vs {tuple(f_freq.shape[-2:])}")
        return self.conv(torch.cat([f_rgb, f_freq], dim=1))


class CoarseHead(nn.Module):
    def __init__(self, channels=HEAD_CHANNELS):
        super().__init__()
        self.conv = nn.Conv2d(channels, 2, 1)

    def forward(self, f):
        return self.conv(f)


class ModalGate(nn.Module):
    """Binary classifier over concat(F_rgb, F_fused, P_rgb, P_fused); returns the FUSED logit."""

    def __init__(self, channels=HEAD_CHANNELS, hidden=32):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(2 * channels + 4, hidden, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.fc = nn.Linear(hidden, 1)

    def forward(self, f_rgb, f_fused, p_rgb, p_fused):
        x = torch.cat([f_rgb, f_fused, p_rgb, p_fused], dim=1)
        x = self.convs(x).mean(dim=(2, 3))
        return self.fc(x).squeeze(1)


def downsample_mask(gt_mask: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """(B,H,W) {0,1} -> (B,H/f,W/f) long via max-pooling."""
    pooled = F.max_pool2d(gt_mask.float().unsqueeze(1), factor)
    return pooled.squeeze(1).long()


def coarse_ce(logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Per-sample mean CE of stride-4 logits against the max-pooled mask."""
    target = downsample_mask(gt_mask, gt_mask.shape[-1] // logits.shape[-1])
    return F.cross_entropy(logits, target, reduction="none").mean(dim=(1, 2))


def gate_teacher_label(p_rgb, p_fused, gt_mask) -> torch.Tensor:
    """1 (FUSED) iff CE(p_fused) < CE(p_rgb); ties go to VISION_ONLY."""
    with torch.no_grad():
        return (coarse_ce(p_fused, gt_mask) < coarse_ce(p_rgb, gt_mask)).long()


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(8, channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class Backbone(nn.Module):
    def __init__(self, in_channels=HEAD_CHANNELS, widths=STAGE_WIDTHS):
        super().__init__()
        stages = []
        prev = in_channels
        for i, width in enumerate(widths):
            entry = conv_gn(prev, width, stride=1 if i == 0 else 2)
            stages.append(nn.Sequential(entry, ResBlock(width), ResBlock(width)))
            prev = width
        self.stages = nn.ModuleList(stages)
        self.widths = tuple(widths)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


@dataclass
class HeadOutput:
    f_rgb: torch.Tensor
    p_rgb: torch.Tensor
    f_fused: torch.Tensor | None = None
    p_fused: torch.Tensor | None = None
    gate_logit: torch.Tensor | None = None

    @property
    def gate_prob(self):
        return None if self.gate_logit is None else torch.sigmoid(self.gate_logit)


@dataclass
class EncoderOutput:
    features: list  # F1..F4 at strides 4, 8, 16, 32
    heads: HeadOutput
    route: torch.Tensor  # (B,) long, 1 = FUSED

    @property
    def gate_prob(self):
        return self.heads.gate_prob

    def decisions(self) -> list[GateDecision]:
        prob = self.gate_prob
        if prob is None:
            return []
        return [GateDecision.from_probability(p) for p in prob.detach().cpu().tolist()]


class ModalGateEncoder(nn.Module):
    """
    modality: "gate" (learned routing), "fused" (always F_fused) or "vision" (always F_rgb).
    """

    def __init__(self, modality: str = "gate", widths=STAGE_WIDTHS):
        super().__init__()
        if modality not in ("gate", "fused", "vision"):
            raise ValueError(f"unknown modality mode {modality!r}")
        self.modality = modality
        self.vision_head = VisionHead()
        self.freq_head = FrequencyHead()
        self.fuse = Fuse()
        self.coarse_rgb = CoarseHead()
        self.coarse_fused = CoarseHead()
        self.gate = ModalGate()
        self.backbone = Backbone(widths=widths)

    def frequency_parameters(self):
        """Parameters that only reach the output through F_fused."""
        for mod in (self.freq_head, self.fuse, self.coarse_fused):
            yield from mod.parameters()

    def heads(self, images: torch.Tensor, need_fused: bool | None = None) -> HeadOutput:
        f_rgb = self.vision_head(images)
        out = HeadOutput(f_rgb=f_rgb, p_rgb=self.coarse_rgb(f_rgb))
        if need_fused is None:
            need_fused = self.modality != "vision"
        if need_fused:
            tokens = dct_tokens(images).to(images.device)
            f_freq = self.freq_head(tokens, tuple(images.shape[-2:]))
            out.f_fused = self.fuse(f_rgb, f_freq)
            out.p_fused = self.coarse_fused(out.f_fused)
            if self.modality == "gate":
                # the gate learns from its own BCE only; it must not reshape the features it judges
                out.gate_logit = self.gate(out.f_rgb.detach(), out.f_fused.detach(),
                                           out.p_rgb.detach(), out.p_fused.detach())
        return out

    def default_route(self, heads: HeadOutput) -> torch.Tensor:
        b = heads.f_rgb.shape[0]
        if self.modality == "vision":
            return torch.zeros(b, dtype=torch.long)
        if self.modality == "fused":
            return torch.ones(b, dtype=torch.long)
        return (heads.gate_prob >= 0.5).long()

    def encode(self, heads: HeadOutput, route: torch.Tensor) -> list:
        route = route.to(heads.f_rgb.device).long()
        if bool((route == 1).any()):
            if heads.f_fused is None:
                raise ValueError("fused route requested but the frequency path was not computed")
            sel = (route == 1).view(-1, 1, 1, 1)
            x = torch.where(sel, heads.f_fused, heads.f_rgb)
        else:
            x = heads.f_rgb
        return self.backbone(x)

    def forward(self, images: torch.Tensor, routing_override=None) -> EncoderOutput:
        need_fused = None
        if routing_override is not None:
            routing_override = torch.as_tensor(routing_override, dtype=torch.long).reshape(-1)
            if routing_override.numel() == 1 and images.shape[0] > 1:
                routing_override = routing_override.expand(images.shape[0])
            # forced all-vision skips the frequency path entirely unless the gate still needs it
            if self.modality != "gate" and not bool(routing_override.any()):
                need_fused = False
        heads = self.heads(images, need_fused)
        route = routing_override if routing_override is not None else self.default_route(heads)
        return EncoderOutput(self.encode(heads, route), heads, route)
