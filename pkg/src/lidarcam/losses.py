"""Rotation, translation and reprojection objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import InvalidRotationError, torch_invert_rigid, torch_pose_matrix, torch_quat_multiply


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_t: float = 0.5
    lambda_pc: float = 0.5
    lambda_norm: float = 0.1

    def __post_init__(self):
        for name in ("lambda_r", "lambda_t", "lambda_pc", "lambda_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss.{name} must be >= 0")


@dataclass
class LossReport:
    l_ang: torch.Tensor
    l_norm: torch.Tensor
    l_r: torch.Tensor
    l_t: torch.Tensor
    l_pc: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in ("l_ang", "l_norm", "l_r", "l_t", "l_pc", "total")}


def _tensor(x, dtype) -> torch.Tensor:
    # numpy inputs may be read-only (Pose arrays); copy instead of sharing
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.tensor(np.asarray(x), dtype=dtype)


def _safe_norm(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # sqrt has an infinite slope at 0; the clamp keeps gradients finite there
    return torch.sqrt(torch.clamp((v * v).sum(dim), min=1e-30))


def geodesic_angle(r: torch.Tensor, r_hat: torch.Tensor) -> torch.Tensor:
    """Angle of q = r * r_hat^-1 for unit quaternions: 2 atan2(|q_xyz|, |q_w|)."""
    conj = r_hat * r_hat.new_tensor([1.0, -1.0, -1.0, -1.0])
    q = torch_quat_multiply(r, conj)
    vec = q[..., 1:]
    angle = 2.0 * torch.atan2(_safe_norm(vec), q[..., 0].abs())
    # exact zero when the vector part vanishes
    return torch.where((vec == 0).all(-1), torch.zeros_like(angle), angle)


def rotation_loss(r: torch.Tensor, r_hat: torch.Tensor, lambda_norm: float = 0.1):
    """Return (l_ang, l_norm, l_r). ``r`` is the raw prediction; it is normalized
    before the geodesic term so the two parts decouple."""
    r_hat = _tensor(r_hat, r.dtype)
    norm = torch.linalg.vector_norm(r, dim=-1)
    # NaNs pass through so the training loop can report the divergence
    if bool((norm == 0).any()):
        raise InvalidRotationError("predicted quaternion has zero norm")
    r_unit = r / norm.unsqueeze(-1)
    r_hat = r_hat / torch.linalg.vector_norm(r_hat, dim=-1, keepdim=True)
    l_ang = geodesic_angle(r_unit, r_hat)
    l_norm = (norm - 1.0) ** 2
    return l_ang, l_norm, l_ang + lambda_norm * l_norm


def translation_loss(t: torch.Tensor, t_hat: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    t_hat = _tensor(t_hat, t.dtype)
    return F.smooth_l1_loss(t, t_hat, beta=beta, reduction="mean")


def reprojection_loss(points: torch.Tensor, t_gt: torch.Tensor, t_pred: torch.Tensor, t_init: torch.Tensor) -> torch.Tensor:
    """Mean displacement (m) of the cloud under T_gt^-1 T_pred^-1 T_init.

    All poses are 4x4 tensors; ``t_pred`` normally carries the gradient.
    """
    if points.shape[0] == 0:
        raise ValueError("reprojection loss needs at least one point")
    dtype = t_pred.dtype
    t_gt = _tensor(t_gt, dtype)
    t_init = _tensor(t_init, dtype)
    points = _tensor(points, dtype)
    M = torch_invert_rigid(t_gt) @ torch_invert_rigid(t_pred) @ t_init
    eye = torch.eye(4, dtype=dtype)
    disp = points @ (M - eye)[:3, :3].T + (M - eye)[:3, 3]
    return _safe_norm(disp).mean()


def pose_matrix(r: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    return torch_pose_matrix(r, t)


def total_loss(l_ang, l_norm, l_t, l_pc, weights: LossWeights = LossWeights()) -> LossReport:
    l_r = l_ang + weights.lambda_norm * l_norm
    total = weights.lambda_r * l_r + weights.lambda_t * l_t + weights.lambda_pc * l_pc
    return LossReport(l_ang, l_norm, l_r, l_t, l_pc, total)


def calibration_loss(r, t, r_hat, t_hat, points, t_gt, t_init, weights: LossWeights = LossWeights()) -> LossReport:
    """All four terms for one sample, given the raw (r, t) prediction."""
    l_ang, l_norm, _ = rotation_loss(r, r_hat, weights.lambda_norm)
    l_t = translation_loss(t, t_hat)
    l_pc = reprojection_loss(points, t_gt, pose_matrix(r, t), t_init)
    return total_loss(l_ang, l_norm, l_t, l_pc, weights)
