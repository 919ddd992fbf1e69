"""Modal fusion with a 1x1 conv and a three-level FPN BEV encoder."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class ShapeMismatchError(ValueError):
    pass


class BEVFuser(nn.Module):
    """Channel concat followed by a per-cell linear map (1x1 conv)."""

    def __init__(self, cam_channels: int, lidar_channels: int, out_channels: int = 64):
        super().__init__()
        self.proj = nn.Conv2d(cam_channels + lidar_channels, out_channels, kernel_size=1)
        self.out_channels = out_channels

    def forward(self, cam: torch.Tensor, lidar: torch.Tensor) -> torch.Tensor:
        if cam.shape[-2:] != lidar.shape[-2:]:
            raise ShapeMismatchError(f"camera BEV {tuple(cam.shape[-2:])} != lidar BEV {tuple(lidar.shape[-2:])}")
        x = torch.cat([cam, lidar], dim=0).unsqueeze(0)
        return self.proj(x)[0]


def fuse(cam: torch.Tensor, lidar: torch.Tensor, fuser: BEVFuser) -> torch.Tensor:
    return fuser(cam, lidar)


class FPNEncoder(nn.Module):
    """Strides 1/2/4 bottom-up, nearest-upsample top-down with 1x1 laterals.

    Only the finest level is returned to the decoder.
    """

    levels = 3

    def __init__(self, channels: int = 64):
        super().__init__()
        c = channels
        self.down1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.lat0 = nn.Conv2d(c, c, 1)
        self.lat1 = nn.Conv2d(c, c, 1)
        self.lat2 = nn.Conv2d(c, c, 1)
        self.smooth = nn.Conv2d(c, c, 3, padding=1)

    @staticmethod
    def check_shape(x_cells: int, y_cells: int) -> None:
        div = 2 ** (FPNEncoder.levels - 1)
        if x_cells % div or y_cells % div:
            raise ValueError(f"grid ({x_cells}, {y_cells}) must be divisible by {div} for the FPN")

    @property
    def receptive_radius(self) -> int:
        """Chebyshev radius (in cells) beyond which a perturbation cannot reach."""
        deepest = 2 ** (self.levels - 1)
        return 2 * (deepest - 1) + 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_shape(x.shape[-2], x.shape[-1])
        c0 = x.unsqueeze(0)
        c1 = torch.relu(self.down1(c0))
        c2 = torch.relu(self.down2(c1))
        p2 = self.lat2(c2)
        p1 = self.lat1(c1) + F.interpolate(p2, scale_factor=2, mode="nearest")
        p0 = self.lat0(c0) + F.interpolate(p1, scale_factor=2, mode="nearest")
        return self.smooth(p0)[0]


def fpn_encode(f: torch.Tensor, encoder: FPNEncoder) -> torch.Tensor:
    return encoder(f)
