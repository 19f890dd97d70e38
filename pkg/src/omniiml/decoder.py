"""PPM/FPN fusion and the dynamic weight decoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

POOL_SCALES = (1, 2, 3, 6)


@dataclass(frozen=True)
class DecoderConfig:
    channels: int = 128
    dilations: tuple = (1, 2, 4, 8)
    head_dwfs: int = 2
    kernel: int = 3

    def __post_init__(self):
        d = list(self.dilations)
        if not d or any(x <= 0 for x in d) or any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"dilations must be strictly increasing positive integers, got {d}")


def _gn(c):
    # at least 4 channels per group so the 1x1 pyramid cell still normalizes with batch size 1
    return nn.GroupNorm(max(1, min(32, c // 4)), c)


class PPM(nn.Module):
    def __init__(self, cin, cout, scales=POOL_SCALES):
        super().__init__()
        self.scales = scales
        branch = cout // 4
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Conv2d(cin, branch, 1, bias=False), _gn(branch), nn.ReLU(inplace=True))
            for _ in scales
        )
        self.bottleneck = nn.Sequential(
            nn.Conv2d(cin + branch * len(scales), cout, 3, padding=1, bias=False), _gn(cout),
            nn.ReLU(inplace=True),
        )

    def pooled(self, x):
        return [F.adaptive_avg_pool2d(x, s) for s in self.scales]

    def forward(self, x):
        outs = [x]
        for pool, branch in zip(self.pooled(x), self.branches):
            outs.append(F.interpolate(branch(pool), size=x.shape[-2:], mode="bilinear", align_corners=False))
        return self.bottleneck(torch.cat(outs, dim=1))


class PpmFpn(nn.Module):
    """Returns D1..D4 (strides 4..32, all `channels` wide) and v_g = GAP(D1)."""

    def __init__(self, in_widths, channels=128):
        super().__init__()
        self.ppm = PPM(in_widths[-1], channels)
        self.laterals = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_widths[:-1])
        self.smooth = nn.ModuleList(
            nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1, bias=False), _gn(channels),
                          nn.ReLU(inplace=True))
            for _ in in_widths[:-1]
        )

    def forward(self, feats):
        top = self.ppm(feats[-1])
        outs = [top]
        for i in range(len(feats) - 2, -1, -1):
            lat = self.laterals[i](feats[i])
            top = lat + F.interpolate(top, size=lat.shape[-2:], mode="bilinear", align_corners=False)
            outs.insert(0, self.smooth[i](top))
        v_g = outs[0].mean(dim=(2, 3))
        return outs, v_g


class DynamicWeightFilter(nn.Module):
    """Depthwise conv with kernel sum_i A_i W_i, A = sigmoid(FC(V_c, V_g)), then 1x1 pointwise."""

    def __init__(self, channels, dilation=1, kernel=3, num_filters=4):
        super().__init__()
        self.channels = channels
        self.dilation = dilation
        self.kernel = kernel
        self.base = nn.Parameter(torch.empty(num_filters, channels, 1, kernel, kernel))
        nn.init.kaiming_uniform_(self.base.view(num_filters * channels, 1, kernel, kernel), a=5 ** 0.5)
        self.mixer = nn.Linear(2 * channels, num_filters)
        self.pointwise = nn.Conv2d(channels, channels, 1)
        self.fixed_attention: float | None = None

    def attention(self, f, v_g):
        if self.fixed_attention is not None:
            return f.new_full((f.shape[0], self.base.shape[0]), self.fixed_attention)
        v_c = f.mean(dim=(2, 3))
        return torch.sigmoid(self.mixer(torch.cat([v_c, v_g], dim=1)))

    def kernels(self, attn):
        """D_opt per sample: (B, C, 1, k, k)."""
        return torch.einsum("bn,ncikl->bcikl", attn, self.base)

    def depthwise(self, f, kernels):
        b, c, h, w = f.shape
        pad = self.dilation * (self.kernel // 2)
        out = F.conv2d(f.reshape(1, b * c, h, w), kernels.reshape(b * c, 1, self.kernel, self.kernel),
                       padding=pad, dilation=self.dilation, groups=b * c)
        return out.reshape(b, c, h, w)

    def forward(self, f, v_g, attn=None):
        if f.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {f.shape[1]}")
        if attn is None:
            attn = self.attention(f, v_g)
        return self.pointwise(self.depthwise(f, self.kernels(attn)))


def dwf_forward(f, v_g, dwf: DynamicWeightFilter):
    return dwf(f, v_g)


class DwfBlock(nn.Module):
    def __init__(self, channels, dilation):
        super().__init__()
        self.dwf = DynamicWeightFilter(channels, dilation)
        self.norm = _gn(channels)

    def forward(self, x, v_g):
        return F.relu(self.norm(self.dwf(x, v_g)))


class DynamicWeightDecoder(nn.Module):
    def __init__(self, config: DecoderConfig = DecoderConfig(), num_classes=2):
        super().__init__()
        c = config.channels
        self.config = config
        self.reduce = nn.ModuleList(nn.Conv2d(c, c, 1) for _ in range(4))
        self.branches = nn.ModuleList(DwfBlock(c, d) for d in config.dilations)
        self.merge = nn.Sequential(nn.Conv2d(c * len(config.dilations), c, 1, bias=False), _gn(c),
                                   nn.ReLU(inplace=True))
        self.head = nn.ModuleList(DwfBlock(c, 1) for _ in range(config.head_dwfs))
        self.classifier = nn.Conv2d(c, num_classes, 1)

    def dwfs(self):
        for block in list(self.branches) + list(self.head):
            yield block.dwf

    def set_fixed_attention(self, value: float | None):
        for dwf in self.dwfs():
            dwf.fixed_attention = value

    def forward(self, feats, v_g, out_hw):
        size = feats[0].shape[-2:]
        x = 0
        for f, reduce in zip(feats, self.reduce):
            if f.shape[-2:] != size:
                f = F.interpolate(f, size=size, mode="bilinear", align_corners=False)
            x = x + reduce(f)
        x = torch.cat([branch(x, v_g) for branch in self.branches], dim=1)
        x = self.merge(x)
        for block in self.head:
            x = block(x, v_g)
        return F.interpolate(self.classifier(x), size=out_hw, mode="bilinear", align_corners=False)


class PlainDecoder(nn.Module):
    """Static FPN fusion head: concat upsampled D1..D4, 3x3 conv, 1x1 classifier."""

    def __init__(self, channels=128, num_classes=2):
        super().__init__()
        self.fuse = nn.Sequential(nn.Conv2d(4 * channels, channels, 3, padding=1, bias=False), _gn(channels),
                                  nn.ReLU(inplace=True))
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def forward(self, feats, v_g, out_hw):
        size = feats[0].shape[-2:]
        ups = [feats[0]] + [F.interpolate(f, size=size, mode="bilinear", align_corners=False) for f in feats[1:]]
        x = self.fuse(torch.cat(ups, dim=1))
        return F.interpolate(self.classifier(x), size=out_hw, mode="bilinear", align_corners=False)
