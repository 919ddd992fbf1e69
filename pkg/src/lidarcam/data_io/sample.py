from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from ..camera_branch import CameraFrame
from ..geometry import Pose
from ..lidar_branch import PointCloud


@dataclass
class Sample:
    frame: CameraFrame
    cloud: PointCloud
    t_gt: Pose
    scene_id: str
    depth: Optional[np.ndarray] = None  # synthetic z-depth, 0 where nothing is hit
    scene: Any = None  # synthetic primitives, kept for analytic oracles
    calib: dict = field(default_factory=dict)  # raw calib matrices as read from disk
