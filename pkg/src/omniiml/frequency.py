"""Block-DCT frequency tokens and the frequency perception head."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BLOCK = 8
NUM_BINS = 21
EMBED_DIM = 16
HEAD_CHANNELS = 32

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _zigzag_order(n: int = BLOCK) -> np.ndarray:
    """Flat indices of an n x n block in JPEG zigzag order."""
    cells = [(r, c) for r in range(n) for c in range(n)]
    cells.sort(key=lambda rc: (rc[0] + rc[1], rc[0] if (rc[0] + rc[1]) % 2 else rc[1]))
    return np.array([r * n + c for r, c in cells])


ZIGZAG = _zigzag_order()
INV_ZIGZAG = np.argsort(ZIGZAG)


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II basis; row k is the k-th basis vector."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] /= np.sqrt(2.0)
    return mat


_DCT = dct_matrix()


def luma(image) -> np.ndarray:
    """Y = 0.299 R + 0.587 G + 0.114 B."""
    arr = np.asarray(image, dtype=np.float64)
    return arr[..., :3] @ LUMA_WEIGHTS


def pad_to_block(plane: np.ndarray, block: int = BLOCK) -> np.ndarray:
    h, w = plane.shape
    ph, pw = (-h) % block, (-w) % block
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    return plane


def block_dct(plane) -> np.ndarray:
    """Orthonormal 8x8 block DCT-II, returned as (H/8, W/8, 64) in zigzag order."""
    plane = pad_to_block(np.asarray(plane, dtype=np.float64))
    h, w = plane.shape
    blocks = plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)
    coeffs = np.einsum("ki,abij,lj->abkl", _DCT, blocks, _DCT)
    return coeffs.reshape(h // BLOCK, w // BLOCK, BLOCK * BLOCK)[..., ZIGZAG]


def inverse_block_dct(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    bh, bw, _ = grid.shape
    coeffs = grid[..., INV_ZIGZAG].reshape(bh, bw, BLOCK, BLOCK)
    blocks = np.einsum("ki,abkl,lj->abij", _DCT, coeffs, _DCT)
    return blocks.transpose(0, 2, 1, 3).reshape(bh * BLOCK, bw * BLOCK)


def quantize_dct(grid) -> np.ndarray:
    """bin = min(floor(|coeff|), 20)."""
    grid = np.asarray(grid, dtype=np.float64)
    return np.minimum(np.floor(np.abs(grid)), NUM_BINS - 1).astype(np.int64)


def dct_tokens(images: torch.Tensor) -> torch.Tensor:
    """Quantized DCT tokens for a (B,3,H,W) batch of [0,255] images -> (B, H/8, W/8, 64) long."""
    arr = images.detach().cpu().numpy().transpose(0, 2, 3, 1)
    tokens = np.stack([quantize_dct(block_dct(luma(img))) for img in arr])
    return torch.from_numpy(tokens)


class FrequencyHead(nn.Module):
    """Embedding lookup per DCT token, two 3x3 convs, 2x nearest upsample to stride 4."""

    def __init__(self, num_bins=NUM_BINS, embed_dim=EMBED_DIM, hidden=64, out_channels=HEAD_CHANNELS):
        super().__init__()
        self.embed = nn.Embedding(num_bins, embed_dim)
        self.conv1 = nn.Conv2d(BLOCK * BLOCK * embed_dim, hidden, 3, padding=1)
        self.norm1 = nn.GroupNorm(8, hidden)
        self.conv2 = nn.Conv2d(hidden, out_channels, 3, padding=1)
        self.out_channels = out_channels

    def forward(self, tokens: torch.Tensor, image_hw: tuple[int, int] | None = None) -> torch.Tensor:
        if tokens.dim() == 3:
            tokens = tokens.unsqueeze(0)
        b, bh, bw, n = tokens.shape
        if n != BLOCK * BLOCK:
            raise ValueError(f"expected 64 coefficients per block, got {n}")
        if image_hw is not None:
            expect = (-(-image_hw[0] // BLOCK), -(-image_hw[1] // BLOCK))
            if (bh, bw) != expect:
                raise ValueError(f"token grid {(bh, bw)} does not match image {tuple(image_hw)}")
        x = self.embed(tokens)  # b, bh, bw, 64, E
        x = x.reshape(b, bh, bw, -1).permute(0, 3, 1, 2)
        x = F.relu(self.norm1(self.conv1(x)))
        x = self.conv2(x)
        return F.interpolate(x, scale_factor=2, mode="nearest")
