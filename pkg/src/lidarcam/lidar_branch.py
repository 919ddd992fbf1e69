"""LiDAR branch: voxelization, a small 3D conv backbone, and height flattening."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .bev_grid import BEVGrid


class EmptySceneError(ValueError):
    """No LiDAR point survives range filtering."""


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3), meters, LiDAR frame
    intensity: Optional[np.ndarray] = None  # (N,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if self.intensity.shape[0] != self.points.shape[0]:
                raise ValueError("intensity length does not match point count")
        if self.points.shape[0] < 1:
            raise EmptySceneError("point cloud is empty")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains NaN/Inf coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class VoxelFeature:
    """Sparse voxels: unique (ix, iy, iz) indices with one feature row each."""

    indices: torch.Tensor  # (M, 3) int64
    features: torch.Tensor  # (M, C)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]


def in_range_mask(points: np.ndarray, grid: BEVGrid) -> np.ndarray:
    ix, iy = grid.cell_xy(points)
    iz = grid.cell_z(points[:, 2])
    radial = np.hypot(points[:, 0], points[:, 1]) <= grid.range
    return radial & grid.in_xy(ix, iy) & (iz >= 0) & (iz < grid.z_bins)


def voxelize(pc: PointCloud, grid: BEVGrid, dtype=torch.float32) -> VoxelFeature:
    """Bin points into voxels; the initial feature is the mean xyz (+ mean intensity)."""
    keep = in_range_mask(pc.points, grid)
    if not keep.any():
        raise EmptySceneError("all points fall outside the scene range")
    pts = pc.points[keep]
    ix, iy = grid.cell_xy(pts)
    iz = grid.cell_z(pts[:, 2])
    flat = (ix * grid.y_cells + iy) * grid.z_bins + iz
    uniq, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)

    cols = [pts]
    if pc.intensity is not None:
        cols.append(pc.intensity[keep, None])
    values = np.concatenate(cols, axis=1)
    sums = np.zeros((uniq.size, values.shape[1]))
    np.add.at(sums, inverse, values)
    feats = sums / counts[:, None]

    idx = np.stack(
        [uniq // (grid.y_cells * grid.z_bins), (uniq // grid.z_bins) % grid.y_cells, uniq % grid.z_bins],
        axis=1,
    )
    return VoxelFeature(torch.from_numpy(idx), torch.from_numpy(feats).to(dtype))


def scatter_dense(v: VoxelFeature, grid: BEVGrid) -> torch.Tensor:
    """(C, X, Y, Z) dense volume; empty voxels are zero."""
    dense = v.features.new_zeros(grid.x_cells, grid.y_cells, grid.z_bins, v.channels)
    ix, iy, iz = v.indices.unbind(1)
    dense = dense.index_put((ix, iy, iz), v.features)
    return dense.permute(3, 0, 1, 2)


def gather_dense(dense: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    ix, iy, iz = indices.unbind(1)
    return dense[:, ix, iy, iz].T


class VoxelEncoder(nn.Module):
    """Submanifold-style 3D conv stack evaluated densely at toy grid sizes.

    Outputs are kept only at the input's occupied voxels, so the sparsity
    pattern is preserved. Hidden layers carry no bias; only the last does.
    """

    def __init__(self, in_channels: int = 3, out_channels: int = 16, hidden: int = 16, layers: int = 2):
        super().__init__()
        if layers < 1:
            raise ValueError("VoxelEncoder needs at least one layer")
        chans = [in_channels] + [hidden] * (layers - 1) + [out_channels]
        self.convs = nn.ModuleList(
            nn.Conv3d(a, b, kernel_size=3, padding=1, bias=(i == layers - 1))
            for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))
        )
        self.out_channels = out_channels

    def forward(self, v: VoxelFeature, grid: BEVGrid) -> VoxelFeature:
        x = scatter_dense(v, grid).unsqueeze(0)
        mask = scatter_dense(VoxelFeature(v.indices, torch.ones_like(v.features[:, :1])), grid).unsqueeze(0)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = torch.relu(x)
            x = x * mask
        return VoxelFeature(v.indices, gather_dense(x[0], v.indices))


class IdentityVoxelEncoder(nn.Module):
    """Pass-through backbone for equivariance tests."""

    def forward(self, v: VoxelFeature, grid: BEVGrid) -> VoxelFeature:
        return v


def encode_voxels(v: VoxelFeature, grid: BEVGrid, backbone: nn.Module) -> VoxelFeature:
    if len(v) == 0:
        raise EmptySceneError("cannot encode an empty voxel set")
    return backbone(v, grid)


def flatten_to_bev(v: VoxelFeature, grid: BEVGrid) -> torch.Tensor:
    """Dense (N_L * Z, X, Y) map; channel ``iz * N_L + c`` holds channel c of slice iz."""
    dense = v.features.new_zeros(grid.z_bins, grid.x_cells, grid.y_cells, v.channels)
    ix, iy, iz = v.indices.unbind(1)
    dense = dense.index_put((iz, ix, iy), v.features)
    return dense.permute(0, 3, 1, 2).reshape(grid.z_bins * v.channels, grid.x_cells, grid.y_cells)


def unflatten_from_bev(bev: torch.Tensor, indices: torch.Tensor, grid: BEVGrid) -> VoxelFeature:
    """Inverse of :func:`flatten_to_bev` on a known sparse support."""
    n_l = bev.shape[0] // grid.z_bins
    vol = bev.reshape(grid.z_bins, n_l, grid.x_cells, grid.y_cells)
    ix, iy, iz = indices.unbind(1)
    return VoxelFeature(indices, vol[iz, :, ix, iy])


class LidarBranch(nn.Module):
    def __init__(self, grid: BEVGrid, in_channels: int = 3, n_l: int = 8, hidden: int = 16, layers: int = 2):
        super().__init__()
        self.grid = grid
        self.backbone = VoxelEncoder(in_channels, n_l, hidden, layers)
        self.out_channels = n_l * grid.z_bins

    def forward(self, v: VoxelFeature) -> torch.Tensor:
        return flatten_to_bev(encode_voxels(v, self.grid, self.backbone), self.grid)
