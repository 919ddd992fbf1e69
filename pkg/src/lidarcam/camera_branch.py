"""Camera branch: 2D features, lift-splat frustum, world transform and BEV pooling."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
from torch import nn

from .bev_grid import BEVGrid
from .geometry import Pose


class InvalidBinCountError(ValueError):
    pass


class InvalidIntrinsicsError(ValueError):
    pass


@dataclass
class CameraFrame:
    image: np.ndarray  # (H, W, 3), float in [0, 1]
    K: np.ndarray  # (4, 4) homogeneous pinhole matrix

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.K = intrinsics_4x4(self.K)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"frame.image must be HxWx3, got {self.image.shape}")
        if not np.all(np.isfinite(self.image)):
            raise ValueError("frame.image contains NaN/Inf")

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


def intrinsics_4x4(K) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    if K.shape == (3, 3):
        out = np.eye(4)
        out[:3, :3] = K
        K = out
    elif K.shape == (3, 4):
        out = np.eye(4)
        out[:3] = K
        K = out
    if K.shape != (4, 4):
        raise InvalidIntrinsicsError(f"frame.K: expected 3x3, 3x4 or 4x4, got {K.shape}")
    if not np.all(np.isfinite(K)):
        raise InvalidIntrinsicsError("frame.K contains NaN/Inf")
    if not (K[0, 0] > 0 and K[1, 1] > 0):
        raise InvalidIntrinsicsError("frame.K: focal lengths K[0][0], K[1][1] must be > 0")
    if not np.array_equal(K[3], [0.0, 0.0, 0.0, 1.0]):
        raise InvalidIntrinsicsError("frame.K: last row must be [0, 0, 0, 1]")
    return K


def scale_intrinsics(K, sx: float, sy: float) -> np.ndarray:
    """Intrinsics after resizing an image by (sx, sy), pixel-center convention."""
    K = intrinsics_4x4(K).copy()
    K[0, 0] *= sx
    K[0, 1] *= sx
    K[0, 2] = (K[0, 2] + 0.5) * sx - 0.5
    K[1, 1] *= sy
    K[1, 2] = (K[1, 2] + 0.5) * sy - 0.5
    return K


@dataclass
class ImageFeature:
    features: torch.Tensor  # (N_C, f_H, f_W)
    factor: int

    @property
    def hw(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]


@dataclass
class Frustum:
    features: torch.Tensor  # (D, f_H, f_W, N_C)
    positions_cam: torch.Tensor  # (D, f_H, f_W, 3), float64
    positions_world: Optional[torch.Tensor] = None
    depth_probs: Optional[torch.Tensor] = None  # (D, f_H, f_W)


def depth_bins(d_min: float, d_max: float, D: int) -> np.ndarray:
    """D uniformly spaced depths from d_min to d_max inclusive."""
    if D < 2:
        raise InvalidBinCountError(f"need at least 2 depth bins, got {D}")
    if not (d_max > d_min > 0):
        raise ValueError(f"need d_max > d_min > 0, got ({d_min}, {d_max})")
    step = (d_max - d_min) / (D - 1)
    return np.array([d_min + step * i for i in range(D)])


class ImageBackbone(nn.Module):
    """Three stride-2 3x3 convs: downsample factor 8."""

    factor = 8

    def __init__(self, out_channels: int = 32, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * hidden, out_channels, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.out_channels = out_channels

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.net(image)


def image_tensor(frame: CameraFrame, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(frame.image).permute(2, 0, 1).to(dtype)


def extract_image_features(frame: CameraFrame, backbone: nn.Module, dtype=torch.float32) -> ImageFeature:
    x = image_tensor(frame, dtype).unsqueeze(0)
    return ImageFeature(backbone(x)[0], backbone.factor)


def feature_pixel_centers(f_h: int, f_w: int, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Image-pixel coordinates of feature-cell centers (pixel centers are integers)."""
    u = np.arange(f_w) * factor + (factor - 1) / 2.0
    v = np.arange(f_h) * factor + (factor - 1) / 2.0
    return u, v


def unproject(u, v, depth, K) -> np.ndarray:
    """Camera-frame points at z = depth through pixel (u, v)."""
    Kinv = np.linalg.inv(intrinsics_4x4(K)[:3, :3])
    u, v, depth = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float))
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    rays = pix @ Kinv.T
    rays = rays / rays[..., 2:3]
    return rays * depth[..., None]


def frustum_positions(f_h: int, f_w: int, factor: int, K, bins) -> torch.Tensor:
    u, v = feature_pixel_centers(f_h, f_w, factor)
    bins = np.asarray(bins, dtype=np.float64)
    uu = np.broadcast_to(u[None, None, :], (bins.size, f_h, f_w))
    vv = np.broadcast_to(v[None, :, None], (bins.size, f_h, f_w))
    dd = np.broadcast_to(bins[:, None, None], (bins.size, f_h, f_w))
    pts = unproject(uu, vv, dd, K)
    # the depth component must equal the bin value exactly
    pts[..., 2] = dd
    return torch.from_numpy(np.ascontiguousarray(pts))


def lift_to_frustum(feat: ImageFeature, frame: CameraFrame, bins, depth_logits: torch.Tensor) -> Frustum:
    """Outer product of per-pixel depth distributions with the 2D features.

    ``depth_logits`` is (D, f_H, f_W); a softmax over D gives the weights.
    """
    f_h, f_w = feat.hw
    probs = torch.softmax(depth_logits, dim=0)
    lifted = probs.unsqueeze(-1) * feat.features.permute(1, 2, 0).unsqueeze(0)
    pos = frustum_positions(f_h, f_w, feat.factor, frame.K, bins)
    return Frustum(features=lifted, positions_cam=pos, depth_probs=probs)


def transform_points(points: torch.Tensor, T: np.ndarray) -> torch.Tensor:
    T = torch.as_tensor(T, dtype=points.dtype)
    homo = torch.cat([points, torch.ones_like(points[..., :1])], dim=-1)
    out = homo @ T.T
    return out[..., :3] / out[..., 3:4]


def frustum_to_world(fr: Frustum, t_init: Pose) -> Frustum:
    """Fill positions_world = [T_init^-1 * P_cam]_{1:3}."""
    T_inv = t_init.inverse().as_matrix()
    return replace(fr, positions_world=transform_points(fr.positions_cam, T_inv))


def frustum_cells(positions: torch.Tensor, grid: BEVGrid, use_height: bool = True):
    """Flat BEV cell index and in-grid mask for (..., 3) positions."""
    pts = positions.reshape(-1, 3)
    ix, iy = grid.cell_xy(pts)
    mask = grid.in_xy(ix, iy)
    if use_height:
        iz = grid.cell_z(pts[:, 2])
        mask = mask & (iz >= 0) & (iz < grid.z_bins)
    return ix * grid.y_cells + iy, mask


def bev_pool(fr: Frustum, grid: BEVGrid, use_height: bool = True) -> torch.Tensor:
    """Sum-splat frustum features into a (N_C, X, Y) map; out-of-grid points dropped.

    With ``use_height`` points outside the grid's z range also count as out of grid.
    """
    if fr.positions_world is None:
        raise ValueError("frustum positions_world is not filled; call frustum_to_world first")
    n_c = fr.features.shape[-1]
    flat, mask = frustum_cells(fr.positions_world, grid, use_height)
    feats = fr.features.reshape(-1, n_c)[mask]
    out = feats.new_zeros(grid.x_cells * grid.y_cells, n_c)
    out = out.index_add(0, flat[mask], feats)
    return out.T.reshape(n_c, grid.x_cells, grid.y_cells)


class CameraBranch(nn.Module):
    def __init__(self, grid: BEVGrid, bins, n_c: int = 32, hidden: int = 16):
        super().__init__()
        self.grid = grid
        self.register_buffer("bins", torch.as_tensor(np.asarray(bins), dtype=torch.float64), persistent=False)
        self.backbone = ImageBackbone(n_c, hidden)
        self.depth_head = nn.Conv2d(n_c, len(bins), kernel_size=1)
        self.out_channels = n_c

    def frustum(self, frame: CameraFrame, t_init: Pose) -> Frustum:
        dtype = self.depth_head.weight.dtype
        feat = extract_image_features(frame, self.backbone, dtype)
        logits = self.depth_head(feat.features.unsqueeze(0))[0]
        fr = lift_to_frustum(feat, frame, self.bins.numpy(), logits)
        return frustum_to_world(fr, t_init)

    def forward(self, frame: CameraFrame, t_init: Pose) -> tuple[torch.Tensor, Frustum]:
        fr = self.frustum(frame, t_init)
        return bev_pool(fr, self.grid), fr
