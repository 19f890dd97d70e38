"""Box-supervised anomaly enhancement: attention decoupling, detection branch, feature fusion.

The detection branch (cascaded FPNs, RPN, box head) only runs in training. At
inference the model uses the attention outputs and the fusion convs alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

from .core import BoundingBox

ANCHOR_SIZES = {8: (32, 64), 16: (64, 128)}
POS_IOU = 0.7
NEG_IOU = 0.3
RPN_BATCH = 32
RPN_POS_FRACTION = 0.5
NUM_PROPOSALS = 16
BOX_FG_IOU = 0.5
POOL_SIZE = 7
SMOOTH_L1_BETA = 1.0 / 9.0


def iou_box(a: BoundingBox, b: BoundingBox) -> float:
    """|a & b| / |a | b| with half-open pixel areas."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0) * max(ih, 0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU of (N,4) and (M,4) x1,y1,x2,y2 boxes."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def make_anchors(feat_hw, stride: int, sizes) -> torch.Tensor:
    """Square anchors centred on each cell, ordered (row, col, size)."""
    h, w = feat_hw
    cy = (torch.arange(h, dtype=torch.float64) + 0.5) * stride
    cx = (torch.arange(w, dtype=torch.float64) + 0.5) * stride
    cy, cx = torch.meshgrid(cy, cx, indexing="ij")
    out = []
    for s in sizes:
        half = s / 2.0
        out.append(torch.stack([cx - half, cy - half, cx + half, cy + half], dim=-1))
    return torch.stack(out, dim=2).reshape(-1, 4).float()


def clip_boxes(boxes: torch.Tensor, image_hw) -> torch.Tensor:
    h, w = image_hw
    x = boxes[:, 0::2].clamp(0, w)
    y = boxes[:, 1::2].clamp(0, h)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def encode_deltas(ref: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return torch.stack([(gx - rx) / rw, (gy - ry) / rh, torch.log(gw / rw), torch.log(gh / rh)], dim=1)


def decode_deltas(ref: torch.Tensor, deltas: torch.Tensor, max_log=4.0) -> torch.Tensor:
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    cx = rx + deltas[:, 0] * rw
    cy = ry + deltas[:, 1] * rh
    w = rw * torch.exp(deltas[:, 2].clamp(max=max_log))
    h = rh * torch.exp(deltas[:, 3].clamp(max=max_log))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def assign_anchors(anchors: torch.Tensor, gt: torch.Tensor, image_hw):
    """Label anchors 1 (pos), 0 (neg), -1 (ignore); also return matched gt index."""
    n = anchors.shape[0]
    labels = torch.full((n,), -1, dtype=torch.long)
    matched = torch.zeros(n, dtype=torch.long)
    if gt.numel() == 0:
        labels[:] = 0
        return labels, matched
    iou = box_iou(clip_boxes(anchors, image_hw), gt)
    best, matched = iou.max(dim=1)
    labels[best <= NEG_IOU] = 0
    labels[best >= POS_IOU] = 1
    per_gt = iou.max(dim=0).values
    for j in range(gt.shape[0]):
        if per_gt[j] > 0:
            hit = iou[:, j] == per_gt[j]
            labels[hit] = 1
            matched[hit] = j
    return labels, matched


def sample_anchors(labels: torch.Tensor, generator: torch.Generator | None = None,
                   batch=RPN_BATCH, pos_fraction=RPN_POS_FRACTION) -> torch.Tensor:
    pos = torch.nonzero(labels == 1).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    n_pos = min(pos.numel(), int(batch * pos_fraction))
    n_neg = min(neg.numel(), batch - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    return torch.cat([pos, neg])


class ChannelSpatialAttention(nn.Module):
    def __init__(self, channels, reduction=4, kernel=7):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.spatial = nn.Conv2d(2, 1, kernel, padding=kernel // 2)

    def forward(self, x):
        w = torch.sigmoid(self.fc2(F.relu(self.fc1(x.mean(dim=(2, 3))))))
        x = x * w[:, :, None, None]
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.spatial(pooled))


@dataclass
class AeFeatures:
    f_a: torch.Tensor
    f_b: torch.Tensor


@dataclass
class DetectionLosses:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    box_cls: torch.Tensor
    box_reg: torch.Tensor

    @property
    def total(self):
        return self.rpn_cls + self.rpn_reg + self.box_cls + self.box_reg

    def as_floats(self) -> dict:
        return {k: getattr(self, k).item() for k in ("rpn_cls", "rpn_reg", "box_cls", "box_reg")}


class AeAttention(nn.Module):
    def __init__(self, c2, c3):
        super().__init__()
        self.att_a = ChannelSpatialAttention(c2)
        self.att_b = ChannelSpatialAttention(c3)

    def forward(self, f2, f3) -> AeFeatures:
        return AeFeatures(self.att_a(f2), self.att_b(f3))


class AeFuse(nn.Module):
    """f2' = conv3x3(f2 + f_a), f3' = conv3x3(f3 + f_b); convs start as identity."""

    def __init__(self, c2, c3):
        super().__init__()
        self.conv2 = nn.Conv2d(c2, c2, 3, padding=1)
        self.conv3 = nn.Conv2d(c3, c3, 3, padding=1)
        for conv in (self.conv2, self.conv3):
            nn.init.dirac_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, f2, f3, ae: AeFeatures):
        return self.conv2(f2 + ae.f_a), self.conv3(f3 + ae.f_b)


class TwoLevelFPN(nn.Module):
    def __init__(self, c_fine, c_coarse, out=64):
        super().__init__()
        self.lat_fine = nn.Conv2d(c_fine, out, 1)
        self.lat_coarse = nn.Conv2d(c_coarse, out, 1)
        self.smooth_fine = nn.Conv2d(out, out, 3, padding=1)
        self.smooth_coarse = nn.Conv2d(out, out, 3, padding=1)

    def forward(self, fine, coarse):
        top = self.lat_coarse(coarse)
        fine = self.lat_fine(fine) + F.interpolate(top, size=fine.shape[-2:], mode="nearest")
        return self.smooth_fine(fine), self.smooth_coarse(top)


class DetectionBranch(nn.Module):
    """Cascaded FPN1 -> FPN2, RPN and a two-class box head. Training only."""

    def __init__(self, c2, c3, width=64, hidden=256):
        super().__init__()
        self.fpn1 = TwoLevelFPN(c2, c3, width)
        self.fpn2 = TwoLevelFPN(width, width, width)
        self.num_anchors = 2
        self.rpn_conv = nn.Conv2d(width, width, 3, padding=1)
        self.rpn_obj = nn.Conv2d(width, self.num_anchors, 1)
        self.rpn_delta = nn.Conv2d(width, 4 * self.num_anchors, 1)
        self.box_fc1 = nn.Linear(width * POOL_SIZE * POOL_SIZE, hidden)
        self.box_fc2 = nn.Linear(hidden, hidden)
        self.box_cls = nn.Linear(hidden, 2)
        self.box_reg = nn.Linear(hidden, 4)
        for layer in (self.rpn_obj, self.rpn_delta):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)
        nn.init.normal_(self.box_reg.weight, std=0.001)
        nn.init.zeros_(self.box_reg.bias)

    def _rpn(self, feat):
        b = feat.shape[0]
        h = F.relu(self.rpn_conv(feat))
        obj = self.rpn_obj(h).permute(0, 2, 3, 1).reshape(b, -1)
        delta = self.rpn_delta(h).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return obj, delta

    def forward(self, ae: AeFeatures, gt_boxes, image_hw, generator: torch.Generator | None = None
                ) -> DetectionLosses:
        p_a, p_b = self.fpn1(ae.f_a, ae.f_b)
        p_a, p_b = self.fpn2(p_a, p_b)
        levels = ((8, p_a), (16, p_b))
        anchors, objs, deltas = [], [], []
        for stride, feat in levels:
            anchors.append(make_anchors(feat.shape[-2:], stride, ANCHOR_SIZES[stride]).to(feat.device))
            o, d = self._rpn(feat)
            objs.append(o)
            deltas.append(d)
        anchors = torch.cat(anchors)
        objs = torch.cat(objs, dim=1)
        deltas = torch.cat(deltas, dim=1)

        zero = objs.sum() * 0.0
        rpn_cls, rpn_reg, box_cls, box_reg = [], [], [], []
        for i, boxes in enumerate(gt_boxes):
            gt = torch.as_tensor([list(bx) for bx in boxes], dtype=torch.float32).reshape(-1, 4)
            labels, matched = assign_anchors(anchors, gt, image_hw)
            idx = sample_anchors(labels, generator)
            rpn_cls.append(F.binary_cross_entropy_with_logits(objs[i, idx], labels[idx].float()))
            pos = idx[labels[idx] == 1]
            if gt.shape[0] and pos.numel():
                target = encode_deltas(anchors[pos], gt[matched[pos]])
                rpn_reg.append(F.smooth_l1_loss(deltas[i, pos], target, beta=SMOOTH_L1_BETA,
                                                reduction="sum") / max(idx.numel(), 1))
            else:
                rpn_reg.append(zero)

            with torch.no_grad():
                decoded = clip_boxes(decode_deltas(anchors, deltas[i].detach()), image_hw)
                keep = (decoded[:, 2] - decoded[:, 0] >= 1) & (decoded[:, 3] - decoded[:, 1] >= 1)
                scores = objs[i].detach().masked_fill(~keep, float("-inf"))
                top = torch.topk(scores, min(NUM_PROPOSALS, scores.numel())).indices
                props = decoded[top[keep[top]]]
                props = torch.cat([props, gt]) if gt.shape[0] else props
            if props.shape[0] == 0:
                box_cls.append(zero)
                box_reg.append(zero)
                continue
            if gt.shape[0]:
                piou = box_iou(props, gt)
                best, match = piou.max(dim=1)
                cls_t = (best >= BOX_FG_IOU).long()
            else:
                cls_t = torch.zeros(props.shape[0], dtype=torch.long)
            logits, reg = self._box_head(levels, props, i)
            box_cls.append(F.cross_entropy(logits, cls_t))
            fg = cls_t == 1
            if fg.any():
                target = encode_deltas(props[fg], gt[match[fg]])
                box_reg.append(F.smooth_l1_loss(reg[fg], target, beta=SMOOTH_L1_BETA, reduction="sum")
                               / props.shape[0])
            else:
                box_reg.append(zero)
        mean = lambda xs: torch.stack(xs).mean()
        return DetectionLosses(mean(rpn_cls), mean(rpn_reg), mean(box_cls), mean(box_reg))

    def _box_head(self, levels, props, batch_index):
        side = torch.sqrt((props[:, 2] - props[:, 0]) * (props[:, 3] - props[:, 1]))
        use_coarse = side >= 64
        pooled = props.new_zeros(props.shape[0], levels[0][1].shape[1], POOL_SIZE, POOL_SIZE)
        for flag, (stride, feat) in zip((False, True), levels):
            sel = use_coarse == flag
            if sel.any():
                rois = torch.cat([torch.zeros(int(sel.sum()), 1), props[sel]], dim=1)
                pooled[sel] = roi_align(feat[batch_index:batch_index + 1], rois, POOL_SIZE,
                                        spatial_scale=1.0 / stride, sampling_ratio=2, aligned=True)
        h = F.relu(self.box_fc1(pooled.flatten(1)))
        h = F.relu(self.box_fc2(h))
        return self.box_cls(h), self.box_reg(h)


def detection_forward(ae: AeFeatures, gt_boxes, branch: DetectionBranch, image_hw, generator=None):
    return branch(ae, gt_boxes, image_hw, generator)
