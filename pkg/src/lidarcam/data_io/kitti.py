"""KITTI-format frames: ``velodyne/NNNNNN.bin``, ``image_2/NNNNNN.png``, ``calib.txt``.

A per-frame ``calib/NNNNNN.txt`` (object-benchmark layout) takes precedence
over the sequence-level ``calib.txt`` when present.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..camera_branch import CameraFrame, InvalidIntrinsicsError
from ..geometry import InvalidRotationError, Pose
from ..lidar_branch import EmptySceneError, PointCloud
from .sample import Sample

EXTRINSIC_KEYS = ("Tr", "Tr_velo_to_cam")


class MissingFileError(FileNotFoundError):
    pass


class MalformedFileError(ValueError):
    pass


def read_velodyne(path) -> PointCloud:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing velodyne file {path}")
    raw = path.read_bytes()
    if len(raw) % 16:
        raise MalformedFileError(f"{path}: {len(raw)} bytes is not a whole number of float32x4 records")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    if data.shape[0] == 0:
        raise EmptySceneError(f"{path}: empty point cloud")
    if not np.all(np.isfinite(data)):
        raise MalformedFileError(f"{path}: non-finite values in point records")
    return PointCloud(data[:, :3].astype(np.float64), data[:, 3].astype(np.float64))


def write_velodyne(path, cloud: PointCloud) -> None:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    data = np.column_stack([cloud.points, inten]).astype("<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data.tobytes())


def read_calib(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing calib file {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise MalformedFileError(f"{path}:{lineno}: expected 'KEY: values'")
        try:
            vals = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise MalformedFileError(f"{path}:{lineno}: {exc}") from exc
        if not np.all(np.isfinite(vals)):
            raise MalformedFileError(f"{path}:{lineno}: non-finite calibration values")
        out[key.strip()] = vals
    if "P2" not in out:
        raise MalformedFileError(f"{path}: no P2 row")
    if not any(k in out for k in EXTRINSIC_KEYS):
        raise MalformedFileError(f"{path}: no Tr / Tr_velo_to_cam row")
    for key in ("P2", *EXTRINSIC_KEYS):
        if key in out and out[key].size != 12:
            raise MalformedFileError(f"{path}: {key} needs 12 values, got {out[key].size}")
    if "R0_rect" in out and out["R0_rect"].size != 9:
        raise MalformedFileError(f"{path}: R0_rect needs 9 values")
    return out


def calib_to_camera(calib: dict[str, np.ndarray]) -> tuple[np.ndarray, Pose]:
    """Intrinsics (4x4) and the LiDAR -> camera-2 extrinsic."""
    P2 = calib["P2"].reshape(3, 4)
    K = np.eye(4)
    K[:3, :3] = P2[:, :3]
    key = next(k for k in EXTRINSIC_KEYS if k in calib)
    T = np.eye(4)
    T[:3] = calib[key].reshape(3, 4)
    if "R0_rect" in calib:
        R0 = np.eye(4)
        R0[:3, :3] = calib["R0_rect"].reshape(3, 3)
        T = R0 @ T
    if np.any(P2[:, 3] != 0):
        # P2 = K [I | b]: fold the stereo baseline into the extrinsic
        shift = np.eye(4)
        shift[:3, 3] = np.linalg.solve(P2[:, :3], P2[:, 3])
        T = shift @ T
    try:
        return K, Pose.from_matrix(T)
    except InvalidRotationError as exc:
        raise MalformedFileError(f"calib extrinsic is not a rotation: {exc}") from exc


def write_calib(path, K: np.ndarray, t_gt: Pose) -> None:
    P2 = np.zeros((3, 4))
    P2[:, :3] = np.asarray(K)[:3, :3]
    fmt = lambda m: " ".join(repr(float(v)) for v in np.ravel(m))
    text = f"P2: {fmt(P2)}\nTr: {t_gt.to_kitti_row()}\n"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing image {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc
    return arr


def write_image(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def sequence_dir(root, sequence: str) -> Path:
    root = Path(root)
    for cand in (root / "sequences" / sequence, root / sequence):
        if cand.is_dir():
            return cand
    raise MissingFileError(f"no sequence {sequence!r} under {root}")


def load_kitti_frame(root, sequence: str, index: int) -> Sample:
    seq = sequence_dir(root, sequence)
    name = f"{index:06d}"
    cloud = read_velodyne(seq / "velodyne" / f"{name}.bin")
    image = read_image(seq / "image_2" / f"{name}.png")
    calib_path = seq / "calib" / f"{name}.txt"
    if not calib_path.is_file():
        calib_path = seq / "calib.txt"
    calib = read_calib(calib_path)
    K, t_gt = calib_to_camera(calib)
    try:
        frame = CameraFrame(image, K)
    except InvalidIntrinsicsError as exc:
        raise MalformedFileError(f"{calib_path}: {exc}") from exc
    return Sample(frame=frame, cloud=cloud, t_gt=t_gt, scene_id=f"{sequence}/{name}", calib=calib)


def frame_indices(root, sequence: str) -> list[int]:
    seq = sequence_dir(root, sequence)
    return sorted(int(p.stem) for p in (seq / "velodyne").glob("*.bin"))


def load_kitti_sequence(root, sequence: str) -> list[Sample]:
    return [load_kitti_frame(root, sequence, i) for i in frame_indices(root, sequence)]


def write_kitti_frame(root, sequence: str, index: int, sample: Sample, per_frame_calib: bool = True) -> Path:
    """Write one frame. With ``per_frame_calib`` the extrinsic goes to
    ``calib/NNNNNN.txt``; otherwise the sequence ``calib.txt`` is overwritten."""
    seq = Path(root) / "sequences" / sequence
    name = f"{index:06d}"
    write_velodyne(seq / "velodyne" / f"{name}.bin", sample.cloud)
    write_image(seq / "image_2" / f"{name}.png", sample.frame.image)
    calib_path = seq / "calib" / f"{name}.txt" if per_frame_calib else seq / "calib.txt"
    write_calib(calib_path, sample.frame.K, sample.t_gt)
    return seq
