"""Full localization model: modal gate encoder, anomaly enhancement, decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .anomaly import AeAttention, AeFeatures, AeFuse, DetectionBranch
from .decoder import DecoderConfig, DynamicWeightDecoder, PlainDecoder, PpmFpn
from .encoder import STAGE_WIDTHS, EncoderOutput, HeadOutput, ModalGateEncoder

ALIGN = 32


@dataclass
class Ablation:
    """Switches mirroring the ablation rows: w.o. MG / MG*, w.o. DWD, w.o. DW, w.o. AE."""

    use_modal_gate: bool = True
    force_modality: str | None = None  # "fused" | "vision", only read when the gate is off
    use_dwd: bool = True
    use_dynamic_weights: bool = True
    use_ae: bool = True

    def __post_init__(self):
        if self.force_modality not in (None, "fused", "vision"):
            raise ValueError(f"force_modality must be fused/vision/None, got {self.force_modality!r}")

    @property
    def modality(self) -> str:
        if self.use_modal_gate:
            return "gate"
        return self.force_modality or "fused"

    @classmethod
    def preset(cls, name: str) -> "Ablation":
        presets = {
            "full": cls(),
            "wo_mg": cls(use_modal_gate=False, force_modality="fused"),
            "wo_mg_star": cls(use_modal_gate=False, force_modality="vision"),
            "wo_dwd": cls(use_dwd=False),
            "wo_dw": cls(use_dynamic_weights=False),
            "wo_ae": cls(use_ae=False),
            "baseline": cls(use_modal_gate=False, force_modality="vision", use_dwd=False, use_ae=False),
        }
        try:
            return presets[name]
        except KeyError:
            raise ValueError(f"unknown ablation preset {name!r}; choose from {sorted(presets)}") from None


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (B, 2, H, W)
    encoder: EncoderOutput
    ae: AeFeatures | None = None

    @property
    def probability(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)[:, 1]


class OmniIML(nn.Module):
    def __init__(self, ablation: Ablation | None = None, decoder: DecoderConfig = DecoderConfig(),
                 widths=STAGE_WIDTHS):
        super().__init__()
        self.ablation = ablation or Ablation()
        self.encoder = ModalGateEncoder(self.ablation.modality, widths)
        self.ae_attention = AeAttention(widths[1], widths[2])
        self.ae_fuse = AeFuse(widths[1], widths[2])
        self.detection = DetectionBranch(widths[1], widths[2])
        self.neck = PpmFpn(widths, decoder.channels)
        if self.ablation.use_dwd:
            self.decoder = DynamicWeightDecoder(decoder)
            if not self.ablation.use_dynamic_weights:
                self.decoder.set_fixed_attention(0.5)
        else:
            self.decoder = PlainDecoder(decoder.channels)

    def ae_parameters(self):
        for mod in (self.ae_attention, self.ae_fuse, self.detection):
            yield from mod.parameters()

    def detection_parameters(self):
        return self.detection.parameters()

    def decode(self, enc: EncoderOutput, out_hw) -> ModelOutput:
        feats = list(enc.features)
        ae = None
        if self.ablation.use_ae:
            ae = self.ae_attention(feats[1], feats[2])
            feats[1], feats[2] = self.ae_fuse(feats[1], feats[2], ae)
        d, v_g = self.neck(feats)
        return ModelOutput(self.decoder(d, v_g, out_hw), enc, ae)

    def forward(self, images: torch.Tensor, routing_override=None) -> ModelOutput:
        check_input(images)
        enc = self.encoder(images, routing_override)
        return self.decode(enc, images.shape[-2:])

    def forward_with_route(self, images: torch.Tensor, heads: HeadOutput, route: torch.Tensor) -> ModelOutput:
        enc = EncoderOutput(self.encoder.encode(heads, route), heads, route)
        return self.decode(enc, images.shape[-2:])


def check_input(images: torch.Tensor):
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (B,3,H,W) images, got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h % ALIGN or w % ALIGN:
        raise ValueError(f"image sides must be multiples of {ALIGN}; got {h}x{w} (use predict() to pad)")


def to_tensor(images) -> torch.Tensor:
    """Stack HxWx3 uint8 arrays into a float (B,3,H,W) tensor in [0,255]."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def predict(model: OmniIML, image, routing_override=None):
    """Tampering probability map (H x W, float64) and gate probability for a single image.

    Pads by edge replication to a multiple of 32 and crops the output back.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    ph, pw = (-h) % ALIGN, (-w) % ALIGN
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    was_training = model.training
    model.eval()
    out = model(to_tensor([img]), routing_override)
    model.train(was_training)
    prob = out.probability[0, :h, :w].double().numpy()
    gate = out.encoder.gate_prob
    return prob, (None if gate is None else float(gate[0]))


@torch.no_grad()
def predict_batch(model: OmniIML, images, batch_size=8, routing_override=None):
    """Probability maps and gate probabilities for equally-sized, aligned images."""
    was_training = model.training
    model.eval()
    probs, gates = [], []
    for i in range(0, len(images), batch_size):
        chunk = images[i:i + batch_size]
        out = model(to_tensor(chunk), routing_override)
        probs.extend(out.probability.double().numpy())
        g = out.encoder.gate_prob
        gates.extend([None] * len(chunk) if g is None else g.tolist())
    model.train(was_training)
    return probs, gates


def mask_loss(logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, gt_mask.long())
