from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class BEVGrid:
    """Metric top-down grid centered on the LiDAR origin.

    Cell (X // 2, Y // 2) contains x = y = 0. Height is split into
    ``z_bins`` uniform slices over [z_min, z_max).
    """

    cell_size: float = 0.75
    x_cells: int = 240
    y_cells: int = 240
    z_bins: int = 8
    z_min: float = -3.0
    z_max: float = 5.0
    range: float = 90.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("grid.cell_size must be > 0")
        if min(self.x_cells, self.y_cells, self.z_bins) < 1:
            raise ValueError("grid extents must be >= 1")
        if self.z_max <= self.z_min:
            raise ValueError("grid.z_max must exceed grid.z_min")
        if self.range <= 0:
            raise ValueError("grid.range must be > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.x_cells, self.y_cells

    @property
    def z_step(self) -> float:
        return (self.z_max - self.z_min) / self.z_bins

    def cell_xy(self, points):
        """Integer (x_B, y_B) cells; works on numpy arrays and torch tensors."""
        if isinstance(points, torch.Tensor):
            ix = torch.floor(points[..., 0] / self.cell_size).long() + self.x_cells // 2
            iy = torch.floor(points[..., 1] / self.cell_size).long() + self.y_cells // 2
            return ix, iy
        points = np.asarray(points, dtype=np.float64)
        ix = np.floor(points[..., 0] / self.cell_size).astype(np.int64) + self.x_cells // 2
        iy = np.floor(points[..., 1] / self.cell_size).astype(np.int64) + self.y_cells // 2
        return ix, iy

    def cell_z(self, z):
        if isinstance(z, torch.Tensor):
            return torch.floor((z - self.z_min) / self.z_step).long()
        return np.floor((np.asarray(z, dtype=np.float64) - self.z_min) / self.z_step).astype(np.int64)

    def in_xy(self, ix, iy):
        return (ix >= 0) & (ix < self.x_cells) & (iy >= 0) & (iy < self.y_cells)
