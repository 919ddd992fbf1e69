"""Geometry-guided BEV decoder.

Frustum world positions pick the BEV cells to decode from; the picked
features get a fixed 2D sinusoidal embedding, pass through a small
self-attention stack, are mean-pooled and fed to separate rotation and
translation MLPs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .bev_grid import BEVGrid
from .geometry import InvalidRotationError, Pose

SELECTOR_MODES = ("geometry", "all")


class EmptySelectionError(RuntimeError):
    """Geometry selection found no frustum point inside the grid."""


@dataclass
class SelectedFeatures:
    positions: torch.Tensor  # (K, 2) int64, unique (x_B, y_B)
    features: torch.Tensor  # (K, N_B)
    embeddings: Optional[torch.Tensor] = None  # (K, N_B)

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class ExtrinsicPrediction:
    rotation_raw: torch.Tensor  # (4,), unnormalized
    translation: torch.Tensor  # (3,)

    def pose(self) -> Pose:
        return assemble_prediction(self)


def project_to_bev(p, grid: BEVGrid) -> tuple[int, int, bool]:
    """Cell (x_B, y_B) of a world point plus an in-bounds flag; z is ignored."""
    p = np.asarray(p, dtype=np.float64)
    ix, iy = grid.cell_xy(p[:2])
    ix, iy = int(ix), int(iy)
    return ix, iy, bool(grid.in_xy(ix, iy))


def selected_cells(p_world: torch.Tensor, grid: BEVGrid) -> torch.Tensor:
    """Sorted unique flat indices ``x_B * Y + y_B`` of the in-grid projections."""
    pts = p_world.reshape(-1, 3)
    ix, iy = grid.cell_xy(pts)
    keep = grid.in_xy(ix, iy)
    return torch.unique(ix[keep] * grid.y_cells + iy[keep])


def select_features(p_world: torch.Tensor, fused: torch.Tensor, grid: BEVGrid, mode: str = "geometry") -> SelectedFeatures:
    if mode == "geometry":
        flat = selected_cells(p_world, grid)
        if flat.numel() == 0:
            raise EmptySelectionError("no frustum position projects inside the BEV grid")
    elif mode == "all":
        flat = torch.arange(grid.x_cells * grid.y_cells)
    else:
        raise ValueError(f"selector mode must be one of {SELECTOR_MODES}, got {mode!r}")
    pos = torch.stack([flat // grid.y_cells, flat % grid.y_cells], dim=1)
    feats = fused.reshape(fused.shape[0], -1)[:, flat].T
    return SelectedFeatures(pos, feats)


def sinusoidal_embedding(positions: torch.Tensor, dim: int, dtype=torch.float32, temperature: float = 10000.0) -> torch.Tensor:
    """(K, 2) integer cells -> (K, dim); first half encodes x_B, second half y_B.

    Each half is ``dim // 4`` (sin, cos) pairs, so every row has norm sqrt(dim / 2).
    """
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4")
    n = dim // 4
    freqs = temperature ** (-torch.arange(n, dtype=torch.float64) / n)
    out = []
    for axis in range(2):
        ang = positions[:, axis : axis + 1].to(torch.float64) * freqs
        out.append(torch.stack([ang.sin(), ang.cos()], dim=-1).reshape(-1, 2 * n))
    return torch.cat(out, dim=1).to(dtype)


def add_positional_embedding(sel: SelectedFeatures, grid: BEVGrid) -> SelectedFeatures:
    emb = sinusoidal_embedding(sel.positions, sel.features.shape[1], sel.features.dtype)
    return SelectedFeatures(sel.positions, sel.features + emb, emb)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.last_weights: Optional[torch.Tensor] = None
        self.keep_weights = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, dim = x.shape
        h, hd = self.heads, dim // self.heads
        q = self.q(x).reshape(n, h, hd).transpose(0, 1)
        k = self.k(x).reshape(n, h, hd).transpose(0, 1)
        v = self.v(x).reshape(n, h, hd).transpose(0, 1)
        if self.keep_weights:
            attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
            self.last_weights = attn.detach()
            y = attn @ v
        else:
            # fused kernel, same math; the CPU flash path only triggers on 4-D input
            y = F.scaled_dot_product_attention(q[None], k[None], v[None])[0]
        y = y.transpose(0, 1).reshape(n, dim)
        return self.out(y)


class AttentionBlock(nn.Module):
    """Pre-norm transformer encoder layer over an unbatched token sequence."""

    def __init__(self, dim: int, heads: int = 4, ff: Optional[int] = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff or 2 * dim), nn.GELU(), nn.Linear(ff or 2 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class Refiner(nn.Module):
    def __init__(self, dim: int, layers: int = 2, heads: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(AttentionBlock(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)


def refine(sel: SelectedFeatures, refiner: Refiner) -> torch.Tensor:
    if len(sel) < 1:
        raise EmptySelectionError("cannot refine an empty selection")
    return refiner(sel.features)


class PoseHeads(nn.Module):
    """Mean pooling, then independent rotation (4) and translation (3) MLPs."""

    def __init__(self, dim: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or dim
        self.rot = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, 4))
        self.trans = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, 3))
        # start at the identity correction
        with torch.no_grad():
            for head in (self.rot, self.trans):
                head[-1].weight.mul_(0.1)
                head[-1].bias.zero_()
            self.rot[-1].bias[0] = 1.0

    def forward(self, refined: torch.Tensor) -> ExtrinsicPrediction:
        if refined.shape[0] < 1:
            raise EmptySelectionError("cannot decode an empty sequence")
        pooled = refined.mean(dim=0)
        return ExtrinsicPrediction(self.rot(pooled), self.trans(pooled))


def decode_heads(refined: torch.Tensor, heads: PoseHeads) -> ExtrinsicPrediction:
    return heads(refined)


def assemble_prediction(pred: ExtrinsicPrediction) -> Pose:
    r = pred.rotation_raw.detach().to(torch.float64).cpu().numpy()
    if not np.all(np.isfinite(r)) or np.linalg.norm(r) == 0.0:
        raise InvalidRotationError("predicted rotation has zero norm")
    return Pose(r, pred.translation.detach().to(torch.float64).cpu().numpy())


class GGBD(nn.Module):
    def __init__(self, grid: BEVGrid, dim: int = 64, layers: int = 2, heads: int = 4, mode: str = "geometry"):
        super().__init__()
        if mode not in SELECTOR_MODES:
            raise ValueError(f"selector mode must be one of {SELECTOR_MODES}, got {mode!r}")
        self.grid = grid
        self.mode = mode
        self.refiner = Refiner(dim, layers, heads)
        self.heads = PoseHeads(dim)

    def forward(self, p_world: torch.Tensor, fused: torch.Tensor) -> ExtrinsicPrediction:
        sel = select_features(p_world, fused, self.grid, self.mode)
        sel = add_positional_embedding(sel, self.grid)
        return self.heads(refine(sel, self.refiner))
