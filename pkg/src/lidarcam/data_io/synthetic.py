"""Procedural scenes: ground plane, axis-aligned boxes and vertical cylinders.

The LiDAR cloud is ray-cast from the origin with a ring/azimuth pattern.
The camera image is a 3-channel encoding of ray-cast depth seen through the
ground-truth extrinsic, so it carries exact geometric signal.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..camera_branch import CameraFrame
from ..geometry import Pose, euler_zyx_to_matrix
from ..lidar_branch import PointCloud
from .sample import Sample

# camera axes expressed in the LiDAR frame: x right, y down, z forward
CAM_TO_LIDAR_BASE = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])

GROUND, BOX, CYLINDER = 0, 1, 2
REFLECTANCE = {GROUND: 0.3, BOX: 0.6, CYLINDER: 0.9}


class DegenerateSceneError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    n_boxes: int = 4
    n_cylinders: int = 3
    scene_range: float = 8.0
    min_dist: float = 2.5  # primitive centers keep this distance from the origin
    front_fraction: float = 0.7  # share of primitives placed in the camera's half-plane
    box_size: tuple[float, float] = (0.6, 2.0)
    box_height: tuple[float, float] = (0.5, 2.5)
    cyl_radius: tuple[float, float] = (0.2, 0.6)
    cyl_height: tuple[float, float] = (0.8, 3.0)
    lidar_height: float = 1.5  # ground plane at z = -lidar_height
    rings: int = 32
    elev_min: float = -25.0  # degrees
    elev_max: float = 5.0
    azimuth_step: float = 1.0  # degrees
    image_hw: tuple[int, int] = (64, 128)
    hfov: float = 90.0  # degrees, used when fx is not given
    fx: Optional[float] = None
    fy: Optional[float] = None
    cx: Optional[float] = None
    cy: Optional[float] = None
    cam_trans: tuple[float, float, float] = (0.3, 0.3, 0.2)  # +- bounds of the camera center, m
    cam_rot: tuple[float, float, float] = (3.0, 5.0, 10.0)  # +- roll/pitch/yaw bounds, degrees
    camera_max_depth: float = 30.0
    rig_seed: Optional[int] = None  # scenes sharing a rig_seed share T_gt (one fixed sensor rig)

    def __post_init__(self):
        if self.n_boxes < 1 or self.n_cylinders < 1 or self.rings < 1:
            raise ValueError("primitive and ring counts must be >= 1")
        if self.azimuth_step <= 0:
            raise ValueError("azimuth_step must be > 0")
        if not (0 < self.min_dist < self.scene_range):
            raise ValueError("need 0 < min_dist < scene_range")
        if max(self.box_size[1], 2 * self.cyl_radius[1]) >= self.scene_range - self.min_dist:
            raise ValueError("primitive extents exceed the scene range")

    @property
    def K(self) -> np.ndarray:
        h, w = self.image_hw
        fx = self.fx if self.fx is not None else (w / 2.0) / math.tan(math.radians(self.hfov) / 2.0)
        fy = self.fy if self.fy is not None else fx
        cx = self.cx if self.cx is not None else (w - 1) / 2.0
        cy = self.cy if self.cy is not None else (h - 1) / 2.0
        K = np.eye(4)
        K[0, 0], K[1, 1], K[0, 2], K[1, 2] = fx, fy, cx, cy
        return K

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSceneSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


@dataclass
class Scene:
    ground_z: float
    boxes: np.ndarray  # (B, 6): min xyz, max xyz
    cylinders: np.ndarray  # (C, 5): cx, cy, radius, z0, z1


def _place(rng: np.random.Generator, spec: SyntheticSceneSpec, margin: float, n: int) -> np.ndarray:
    out = []
    r_max = spec.scene_range - margin
    for _ in range(n):
        if rng.uniform() < spec.front_fraction:
            az = rng.uniform(-math.radians(50), math.radians(50))
        else:
            az = rng.uniform(-math.pi, math.pi)
        r = rng.uniform(spec.min_dist, r_max)
        out.append((r * math.cos(az), r * math.sin(az)))
    return np.array(out)


def build_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> Scene:
    gz = -spec.lidar_height
    margin = max(spec.box_size[1], 2 * spec.cyl_radius[1])
    centers = _place(rng, spec, margin, spec.n_boxes)
    sizes = rng.uniform(*spec.box_size, size=(spec.n_boxes, 2))
    heights = rng.uniform(*spec.box_height, size=spec.n_boxes)
    boxes = np.column_stack(
        [centers - sizes / 2, np.full(spec.n_boxes, gz), centers + sizes / 2, gz + heights]
    )
    cc = _place(rng, spec, margin, spec.n_cylinders)
    radius = rng.uniform(*spec.cyl_radius, size=spec.n_cylinders)
    ch = rng.uniform(*spec.cyl_height, size=spec.n_cylinders)
    cyl = np.column_stack([cc, radius, np.full(spec.n_cylinders, gz), gz + ch])
    return Scene(gz, boxes, cyl)


# --------------------------------------------------------------------------
# ray casting
# --------------------------------------------------------------------------


def _hit_plane(o, d, z):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z - o[:, 2]) / d[:, 2]
    return np.where((d[:, 2] < 0) & (t > 0), t, np.inf)


def _hit_box(o, d, box):
    lo, hi = box[:3], box[3:]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    ok = (tmax >= tmin) & (tmin > 0)
    return np.where(ok, tmin, np.inf)


def _hit_cylinder(o, d, cyl):
    cx, cy, r, z0, z1 = cyl
    ox, oy = o[:, 0] - cx, o[:, 1] - cy
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox**2 + oy**2 - r**2
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    z_side = o[:, 2] + t_side * d[:, 2]
    side_ok = (disc >= 0) & (a > 0) & (t_side > 0) & (z_side >= z0) & (z_side <= z1)
    t_side = np.where(side_ok, t_side, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_top = (z1 - o[:, 2]) / d[:, 2]
    px = ox + t_top * d[:, 0]
    py = oy + t_top * d[:, 1]
    top_ok = (d[:, 2] < 0) & (t_top > 0) & (px**2 + py**2 <= r * r)
    t_top = np.where(top_ok, t_top, np.inf)
    return np.minimum(t_side, t_top)


def raycast(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance along each ray (inf on miss) and the primitive kind."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    best = _hit_plane(origins, dirs, scene.ground_z)
    kind = np.full(best.shape, GROUND)
    for box in scene.boxes:
        t = _hit_box(origins, dirs, box)
        closer = t < best
        best, kind = np.where(closer, t, best), np.where(closer, BOX, kind)
    for cyl in scene.cylinders:
        t = _hit_cylinder(origins, dirs, cyl)
        closer = t < best
        best, kind = np.where(closer, t, best), np.where(closer, CYLINDER, kind)
    kind = np.where(np.isfinite(best), kind, -1)
    return best, kind


def surface_distance(scene: Scene, points: np.ndarray) -> np.ndarray:
    """Unsigned distance from points to the nearest primitive surface."""
    points = np.asarray(points, dtype=np.float64)
    dist = np.abs(points[:, 2] - scene.ground_z)
    for box in scene.boxes:
        center = (box[:3] + box[3:]) / 2
        half = (box[3:] - box[:3]) / 2
        q = np.abs(points - center) - half
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.minimum(q.max(axis=1), 0)
        dist = np.minimum(dist, np.abs(outside + inside))
    for cx, cy, r, z0, z1 in scene.cylinders:
        radial = np.hypot(points[:, 0] - cx, points[:, 1] - cy) - r
        zc, zh = (z0 + z1) / 2, (z1 - z0) / 2
        axial = np.abs(points[:, 2] - zc) - zh
        q = np.stack([radial, axial], axis=1)
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.minimum(q.max(axis=1), 0)
        dist = np.minimum(dist, np.abs(outside + inside))
    return dist


def lidar_dirs(spec: SyntheticSceneSpec) -> np.ndarray:
    elev = np.deg2rad(np.linspace(spec.elev_min, spec.elev_max, spec.rings))
    az = np.deg2rad(np.arange(0.0, 360.0, spec.azimuth_step))
    e, a = np.meshgrid(elev, az, indexing="ij")
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


def scan_lidar(scene: Scene, spec: SyntheticSceneSpec) -> PointCloud:
    dirs = lidar_dirs(spec)
    t, kind = raycast(scene, np.zeros(3), dirs)
    keep = np.isfinite(t)
    pts = dirs * np.where(keep, t, 0.0)[:, None]
    keep &= np.hypot(pts[:, 0], pts[:, 1]) <= spec.scene_range
    if not keep.any():
        raise DegenerateSceneError("LiDAR scan hit nothing inside the scene range")
    inten = np.array([REFLECTANCE[k] for k in kind[keep]])
    return PointCloud(pts[keep], inten)


def pixel_rays(K: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Camera-frame rays with unit z through every pixel center, (H, W, 3)."""
    h, w = hw
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    rays = pix @ np.linalg.inv(K[:3, :3]).T
    return rays / rays[..., 2:3]


def render_depth(scene: Scene, t_gt: Pose, K: np.ndarray, hw: tuple[int, int], max_depth: float) -> np.ndarray:
    """Z-depth per pixel (0 where no surface is hit within ``max_depth``)."""
    cam_to_lidar = t_gt.inverse()
    rays_cam = pixel_rays(K, hw).reshape(-1, 3)
    dirs = rays_cam @ cam_to_lidar.R.T
    t, _ = raycast(scene, cam_to_lidar.translation, dirs)
    depth = t  # rays have unit camera-z, so distance along them is z-depth
    depth = np.where(np.isfinite(depth) & (depth <= max_depth), depth, 0.0)
    return depth.reshape(hw)


def encode_depth_image(depth: np.ndarray) -> np.ndarray:
    """(inverse depth, cos band, sin band) in [0, 1]; misses are black."""
    hit = depth > 0
    safe = np.where(hit, depth, 1.0)
    inv = np.clip(1.0 / safe, 0.0, 1.0)
    phase = 2 * np.pi * safe / 2.0
    img = np.stack([inv, 0.5 * (1 + np.cos(phase)), 0.5 * (1 + np.sin(phase))], axis=-1)
    return np.where(hit[..., None], img, 0.0).astype(np.float32)


def sample_extrinsic(spec: SyntheticSceneSpec, rng: np.random.Generator) -> Pose:
    """T_gt (LiDAR -> camera) around a forward-looking mount."""
    center = rng.uniform(-1, 1, size=3) * np.asarray(spec.cam_trans)
    roll, pitch, yaw = np.deg2rad(rng.uniform(-1, 1, size=3) * np.asarray(spec.cam_rot))
    # perturb in the camera frame: pitch about camera x, yaw about camera y, roll about z
    R_pert = euler_zyx_to_matrix(pitch, yaw, roll)
    R_cl = CAM_TO_LIDAR_BASE @ R_pert
    R_lc = R_cl.T
    return Pose.from_rt(R_lc, -R_lc @ center)


def generate_synthetic(spec: SyntheticSceneSpec, scene_id: Optional[str] = None) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5CE7E]))
    scene = build_scene(spec, rng)
    t_gt = sample_extrinsic(spec, rng)
    if spec.rig_seed is not None:
        t_gt = sample_extrinsic(spec, np.random.default_rng(np.random.SeedSequence([spec.rig_seed, 0x216])))
    cloud = scan_lidar(scene, spec)
    K = spec.K
    depth = render_depth(scene, t_gt, K, spec.image_hw, spec.camera_max_depth)
    if not (depth > 0).any():
        raise DegenerateSceneError("camera sees no geometry")
    frame = CameraFrame(encode_depth_image(depth), K)
    return Sample(
        frame=frame,
        cloud=cloud,
        t_gt=t_gt,
        scene_id=scene_id or f"synth_{spec.seed:06d}",
        depth=depth,
        scene=scene,
    )


def write_manifest(path, specs: list[SyntheticSceneSpec]) -> None:
    entries = [{"scene_id": f"synth_{s.seed:06d}", "seed": s.seed, "spec": s.to_dict()} for s in specs]
    Path(path).write_text(json.dumps({"version": 1, "scenes": entries}, indent=2))


def read_manifest(path) -> list[tuple[str, SyntheticSceneSpec]]:
    data = json.loads(Path(path).read_text())
    out = []
    for entry in data["scenes"]:
        spec = SyntheticSceneSpec.from_dict(entry["spec"])
        if spec.seed != entry["seed"]:
            raise ValueError(f"manifest seed mismatch for {entry['scene_id']}")
        out.append((entry["scene_id"], spec))
    return out


def load_manifest(path) -> list[Sample]:
    return [generate_synthetic(spec, sid) for sid, spec in read_manifest(path)]


def rig_scenes(n: int, rig_seed: int = 0, first_seed: int = 0, **spec) -> list[Sample]:
    """``n`` different scenes observed by one fixed sensor rig (shared T_gt)."""
    return [generate_synthetic(SyntheticSceneSpec(seed=first_seed + i, rig_seed=rig_seed, **spec)) for i in range(n)]
