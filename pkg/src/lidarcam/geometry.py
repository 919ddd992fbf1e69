"""SE(3) and quaternion algebra, noise injection, extrinsic recovery and metrics.

Conventions:
    - Quaternions are stored (w, x, y, z); the canonical sign has w >= 0.
    - A Pose maps LiDAR-frame points into the camera frame: p_cam = R p_lidar + t.
    - Angles are radians internally; degrees appear only in NoiseSpec and
      CalibrationError.
    - Euler angles for metrics are intrinsic Z-Y-X: R = Rz(yaw) Ry(pitch) Rx(roll).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch


class InvalidRotationError(ValueError):
    """Raised for zero-norm (or non-finite) quaternions."""


# --------------------------------------------------------------------------
# quaternion helpers (numpy, float64)
# --------------------------------------------------------------------------


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidRotationError(f"cannot normalize quaternion {q!r}")
    return q / n


def canonical_quat(q) -> np.ndarray:
    """Normalize and resolve the double cover so that w >= 0."""
    q = normalize_quat(q)
    return -q if q[0] < 0 else q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of ``q`` (normalized internally).

    Every term is quadratic in the components, so q and -q give the exact
    same matrix.
    """
    w, x, y, z = normalize_quat(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Canonical quaternion of a rotation matrix (Shepperd's method).

    Slightly non-orthonormal input (e.g. KITTI calib rows printed to a few
    digits) is tolerated; the result is always a unit quaternion.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotationError("rotation must be a finite 3x3 matrix")
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (R[0, 0], R[1, 1], R[2, 2])
    k = int(np.argmax((tr, *diag)))
    if k == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(max(1.0 + R[1, 1] - R[0, 0] - R[2, 2], 0.0))
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 + R[2, 2] - R[0, 0] - R[1, 1], 0.0))
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical_quat(q)


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_zyx_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def matrix_to_euler_zyx(R) -> tuple[float, float, float, bool]:
    """Return (roll, pitch, yaw, gimbal_locked) with R = Rz(yaw) Ry(pitch) Rx(roll)."""
    R = np.asarray(R, dtype=np.float64)
    sp = float(np.clip(-R[2, 0], -1.0, 1.0))
    pitch = math.asin(sp)
    locked = abs(abs(pitch) - math.pi / 2) < 1e-6
    if locked:
        # roll and yaw are coupled; attribute everything to yaw
        roll = 0.0
        yaw = math.atan2(-R[0, 1], R[1, 1])
    else:
        roll = math.atan2(R[2, 1], R[2, 2])
        yaw = math.atan2(R[1, 0], R[0, 0])
    return roll, pitch, yaw, locked


# --------------------------------------------------------------------------
# Pose
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Rigid transform stored as a canonical unit quaternion plus translation (m)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("pose translation must be finite")
        q = canonical_quat(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        if T.shape not in ((4, 4), (3, 4)):
            raise ValueError(f"expected a 4x4 or 3x4 matrix, got {T.shape}")
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_tuple(cls, values: Sequence[float]) -> "Pose":
        """Build from the 7-tuple (qw, qx, qy, qz, tx, ty, tz)."""
        values = [float(v) for v in values]
        if len(values) != 7:
            raise ValueError(f"pose tuple needs 7 values, got {len(values)}")
        return cls(values[:4], values[4:])

    def to_tuple(self) -> tuple[float, ...]:
        return tuple(float(v) for v in (*self.rotation, *self.translation))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        R = self.R
        return Pose(quat_conjugate(self.rotation), -R.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self * other (apply ``other`` first)."""
        q = quat_multiply(self.rotation, other.rotation)
        return Pose(q, self.R @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        """Transform (..., 3) points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.translation

    def to_kitti_row(self) -> str:
        """The upper 3x4 block, row-major, as 12 floats (exact repr)."""
        return " ".join(repr(float(v)) for v in self.as_matrix()[:3].ravel())

    def to_text(self) -> str:
        """Full 4x4 matrix as 16 row-major floats."""
        return " ".join(repr(float(v)) for v in self.as_matrix().ravel())

    @classmethod
    def from_text(cls, text: str) -> "Pose":
        vals = np.array([float(v) for v in text.split()])
        if vals.size == 16:
            return cls.from_matrix(vals.reshape(4, 4))
        if vals.size == 12:
            return cls.from_matrix(vals.reshape(3, 4))
        if vals.size == 7:
            return cls.from_tuple(vals)
        raise ValueError(f"cannot parse pose from {vals.size} values")

    def angle(self) -> float:
        """Rotation angle in radians."""
        w = min(abs(float(self.rotation[0])), 1.0)
        return 2.0 * math.atan2(float(np.linalg.norm(self.rotation[1:])), w)


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def invert(p: Pose) -> Pose:
    return p.inverse()


# --------------------------------------------------------------------------
# noise protocol
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    """Uniform noise bounds: meters per translation axis, degrees per Euler axis."""

    max_trans: float = 1.5
    max_rot: float = 20.0

    def __post_init__(self):
        if not (self.max_trans >= 0 and self.max_rot >= 0):
            raise ValueError(f"noise bounds must be >= 0, got ({self.max_trans}, {self.max_rot})")

    @property
    def label(self) -> str:
        return f"(±{self.max_trans:g}m, ±{self.max_rot:g}°)"


# regimes of the KITTI comparison table
EVAL_REGIMES = (
    NoiseSpec(1.5, 20.0),
    NoiseSpec(0.5, 5.0),
    NoiseSpec(0.25, 10.0),
    NoiseSpec(0.2, 20.0),
)


def sample_noise(spec: NoiseSpec, rng: np.random.Generator) -> Pose:
    """Draw T_delta: uniform per-axis translation and uniform Z-Y-X Euler angles."""
    t = rng.uniform(-spec.max_trans, spec.max_trans, size=3)
    ang = np.deg2rad(rng.uniform(-spec.max_rot, spec.max_rot, size=3))
    return Pose.from_rt(euler_zyx_to_matrix(*ang), t)


def make_initial(t_gt: Pose, t_delta: Pose) -> Pose:
    """T_init = T_delta * T_gt."""
    return t_delta.compose(t_gt)


def supervision_target(t_init: Pose, t_gt: Pose) -> Pose:
    """Regression target T_init * T_gt^-1 (equals T_delta)."""
    return t_init.compose(t_gt.inverse())


def recover_extrinsic(t_pred: Pose, t_init: Pose) -> Pose:
    """Final extrinsic estimate T_pred^-1 * T_init."""
    return t_pred.inverse().compose(t_init)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationError:
    trans_xyz: np.ndarray  # cm, per axis
    rot_rpy: np.ndarray  # degrees, (roll, pitch, yaw)
    e_t: float  # cm
    e_r: float  # degrees
    gimbal_lock: bool = False

    def row(self) -> dict[str, float]:
        x, y, z = (float(v) for v in self.trans_xyz)
        r, p, yw = (float(v) for v in self.rot_rpy)
        return {"X": x, "Y": y, "Z": z, "Roll": r, "Pitch": p, "Yaw": yw, "E_t": self.e_t, "E_R": self.e_r}


def compute_metrics(pred: Pose, gt: Pose) -> CalibrationError:
    trans = np.abs(gt.translation - pred.translation) * 100.0
    roll, pitch, yaw, locked = matrix_to_euler_zyx(pred.R @ gt.R.T)
    rot = np.abs(np.rad2deg([roll, pitch, yaw]))
    return CalibrationError(
        trans_xyz=trans,
        rot_rpy=rot,
        e_t=float(np.linalg.norm(trans)),
        e_r=float(np.linalg.norm(rot)),
        gimbal_lock=locked,
    )


# --------------------------------------------------------------------------
# torch counterparts (differentiable)
# --------------------------------------------------------------------------


def torch_quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def torch_quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) -> (..., 3, 3); ``q`` is normalized inside."""
    q = q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(*q.shape[:-1], 3, 3)


def torch_pose_matrix(r: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Homogeneous 4x4 from a raw quaternion and translation."""
    T = torch.zeros(*r.shape[:-1], 4, 4, dtype=r.dtype, device=r.device)
    T[..., :3, :3] = torch_quat_to_matrix(r)
    T[..., :3, 3] = t
    T[..., 3, 3] = 1.0
    return T


def torch_invert_rigid(T: torch.Tensor) -> torch.Tensor:
    R = T[..., :3, :3]
    t = T[..., :3, 3:]
    Rt = R.transpose(-1, -2)
    out = torch.zeros_like(T)
    out[..., :3, :3] = Rt
    out[..., :3, 3:] = -Rt @ t
    out[..., 3, 3] = 1.0
    return out
