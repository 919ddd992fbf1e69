"""End-to-end calibration network: LiDAR + camera BEV, fusion, FPN, GGBD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .camera_branch import CameraBranch, CameraFrame, Frustum, bev_pool, depth_bins
from .bev_fusion import BEVFuser, FPNEncoder
from .data_io.config import RunConfig
from .geometry import Pose
from .ggbd import GGBD, ExtrinsicPrediction
from .lidar_branch import LidarBranch, PointCloud, VoxelFeature, encode_voxels, flatten_to_bev, voxelize

LIDAR_IN_CHANNELS = 4  # mean xyz + mean intensity


@dataclass
class ForwardAux:
    camera_bev: torch.Tensor
    lidar_bev: torch.Tensor
    fused: torch.Tensor
    frustum: Frustum


def lidar_voxels(cloud: PointCloud, cfg: RunConfig, dtype=torch.float32) -> VoxelFeature:
    """Voxelize with intensity always present and xyz scaled to the scene range."""
    if cloud.intensity is None:
        cloud = PointCloud(cloud.points, np.zeros(len(cloud)))
    v = voxelize(cloud, cfg.grid, dtype=dtype)
    scale = v.features.new_tensor([1.0 / cfg.grid.range] * 3 + [1.0])
    return VoxelFeature(v.indices, v.features * scale)


class CalibrationModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        m, grid = cfg.model, cfg.grid
        FPNEncoder.check_shape(grid.x_cells, grid.y_cells)
        self.cfg = cfg
        self.grid = grid
        self.bins = depth_bins(cfg.depth.d_min, cfg.d_max, cfg.depth.bins)
        self.lidar = LidarBranch(grid, LIDAR_IN_CHANNELS, m.n_l, m.voxel_hidden, m.voxel_layers)
        self.camera = CameraBranch(grid, self.bins, m.n_c, m.image_hidden)
        self.fuser = BEVFuser(m.n_c, m.n_l * grid.z_bins, m.n_b)
        self.fpn = FPNEncoder(m.n_b)
        self.decoder = GGBD(grid, m.n_b, m.attn_layers, m.heads, m.selector)
        self.forward_calls = 0

    @property
    def dtype(self) -> torch.dtype:
        return self.fuser.proj.weight.dtype

    def forward(self, voxels: VoxelFeature, frame: CameraFrame, t_init: Pose, return_aux: bool = False):
        self.forward_calls += 1
        voxels = VoxelFeature(voxels.indices, voxels.features.to(self.dtype))
        lidar_bev = flatten_to_bev(encode_voxels(voxels, self.grid, self.lidar.backbone), self.grid)
        fr = self.camera.frustum(frame, t_init)
        cam_bev = bev_pool(fr, self.grid, use_height=self.cfg.model.bev_height_filter)
        fused = self.fpn(self.fuser(cam_bev, lidar_bev))
        pred: ExtrinsicPrediction = self.decoder(fr.positions_world, fused)
        if return_aux:
            return pred, ForwardAux(cam_bev, lidar_bev, fused, fr)
        return pred


def build_model(cfg: RunConfig, seed: int | None = None) -> CalibrationModel:
    if seed is not None:
        torch.manual_seed(seed)
    return CalibrationModel(cfg)
