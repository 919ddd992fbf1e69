"""Training, evaluation, single-frame calibration and overlay rendering."""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data_io.config import RunConfig, config_from_dict
from .data_io.sample import Sample
from .geometry import (
    CalibrationError,
    NoiseSpec,
    Pose,
    compute_metrics,
    make_initial,
    recover_extrinsic,
    sample_noise,
    supervision_target,
)
from .ggbd import EmptySelectionError, assemble_prediction
from .lidar_branch import VoxelFeature
from .losses import LossReport, calibration_loss
from .model import CalibrationModel, build_model, lidar_voxels

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
REPORT_COLUMNS = ("X", "Y", "Z", "Roll", "Pitch", "Yaw", "E_t", "E_R")


class TrainingDivergedError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------


@dataclass
class Prepared:
    sample: Sample
    voxels: VoxelFeature
    points: torch.Tensor  # float64 subsample used by the reprojection loss
    t_gt_matrix: torch.Tensor


def prepare(samples: Sequence[Sample], cfg: RunConfig, seed: int = 0) -> list[Prepared]:
    out = []
    for i, s in enumerate(samples):
        pts = s.cloud.points
        if pts.shape[0] > cfg.train.max_points:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 7, i]))
            pts = pts[np.sort(rng.choice(pts.shape[0], cfg.train.max_points, replace=False))]
        out.append(
            Prepared(
                sample=s,
                voxels=lidar_voxels(s.cloud, cfg),
                points=torch.from_numpy(np.ascontiguousarray(pts)),
                t_gt_matrix=torch.from_numpy(s.t_gt.as_matrix()),
            )
        )
    return out


def sample_loss(model: CalibrationModel, item: Prepared, t_delta: Pose, cfg: RunConfig) -> LossReport:
    t_gt = item.sample.t_gt
    t_init = make_initial(t_gt, t_delta)
    target = supervision_target(t_init, t_gt)
    pred = model(item.voxels, item.sample.frame, t_init)
    dtype = model.dtype
    return calibration_loss(
        pred.rotation_raw,
        pred.translation,
        torch.tensor(target.rotation, dtype=dtype),
        torch.tensor(target.translation, dtype=dtype),
        item.points.to(dtype),
        item.t_gt_matrix.to(dtype),
        torch.as_tensor(t_init.as_matrix(), dtype=dtype),
        cfg.loss,
    )


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _unshare(obj):
    """Rebuild containers with fresh string objects.

    Pickle memoizes by object identity, so a string shared between, say, a
    config key and a payload key is written as a back-reference; after a load
    the two copies are distinct and the bytes change. With no sharing at all
    save -> load -> save is byte-stable.
    """
    if isinstance(obj, dict):
        return type(obj)((_unshare(k), _unshare(v)) for k, v in obj.items())
    if isinstance(obj, list):
        return [_unshare(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_unshare(v) for v in obj)
    if isinstance(obj, str) and len(obj) > 1:
        return obj[:1] + obj[1:]
    return obj


@dataclass
class Checkpoint:
    model_state: dict
    config: dict
    optimizer_state: Optional[dict] = None
    scheduler_state: Optional[dict] = None
    step: int = 0
    epoch: int = 0
    version: int = CHECKPOINT_VERSION

    @property
    def run_config(self) -> RunConfig:
        return config_from_dict(self.config)

    def build_model(self) -> CalibrationModel:
        model = build_model(self.run_config)
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    def save(self, path) -> None:
        payload = {
            "version": self.version,
            "config": self.config,
            "model": self.model_state,
            "optimizer": self.optimizer_state,
            "scheduler": self.scheduler_state,
            "step": self.step,
            "epoch": self.epoch,
        }
        buf = io.BytesIO()
        torch.save(_unshare(payload), buf)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
        config_from_dict(payload["config"])
        return cls(
            model_state=payload["model"],
            config=payload["config"],
            optimizer_state=payload["optimizer"],
            scheduler_state=payload["scheduler"],
            step=payload["step"],
            epoch=payload["epoch"],
        )


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: CalibrationModel
    history: list[dict] = field(default_factory=list)
    noise_pool: Optional[list[list[Pose]]] = None
    skipped: int = 0

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"]


def make_noise_pool(n_samples: int, k: int, spec: NoiseSpec, seed: int) -> list[list[Pose]]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9001]))
    return [[sample_noise(spec, rng) for _ in range(k)] for _ in range(n_samples)]


def _dump_nan(out_dir: Optional[Path], step: int, batch: list[tuple[int, Pose]], items: list[Prepared]) -> str:
    info = {
        "step": step,
        "batch": [{"scene_id": items[i].sample.scene_id, "t_delta": d.to_tuple()} for i, d in batch],
    }
    if out_dir is not None:
        path = Path(out_dir) / "nan_dump.json"
        path.write_text(json.dumps(info, indent=2))
    return json.dumps(info)


def train(
    cfg: RunConfig,
    samples: Sequence[Sample],
    out_dir=None,
    model: Optional[CalibrationModel] = None,
    on_step: Optional[Callable[[int, dict], None]] = None,
) -> TrainResult:
    """AdamW + StepLR over (scene, noise) items; one ``epoch`` is one pass over the items.

    With ``train.noise_pool = k > 0`` each scene gets k fixed noise draws and the
    items are the k * len(samples) pairs; otherwise noise is redrawn per visit.
    """
    if len(samples) == 0:
        raise ValueError("training set is empty")
    tc = cfg.train
    torch.manual_seed(tc.seed)
    model = model or build_model(cfg)
    model.train()
    items = prepare(samples, cfg, tc.seed)
    pool = make_noise_pool(len(items), tc.noise_pool, cfg.noise, tc.seed) if tc.noise_pool else None
    pairs = [(i, k) for i in range(len(items)) for k in range(max(tc.noise_pool, 1))]

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.optim.step_size, gamma=cfg.optim.gamma)
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0x7EA1]))
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "w")

    history: list[dict] = []
    step = 0
    skipped = 0
    epoch = 0
    done = False
    try:
        while epoch < tc.epochs and not done:
            order = rng.permutation(len(pairs))
            for start in range(0, len(order), tc.batch_size):
                batch = []
                for j in order[start : start + tc.batch_size]:
                    i, k = pairs[j]
                    t_delta = pool[i][k] if pool else sample_noise(cfg.noise, rng)
                    batch.append((i, t_delta))
                reports = []
                for i, t_delta in batch:
                    try:
                        reports.append(sample_loss(model, items[i], t_delta, cfg))
                    except EmptySelectionError:
                        skipped += 1
                        log.warning("skipping %s: empty geometry selection", items[i].sample.scene_id)
                if not reports:
                    continue
                total = torch.stack([r.total for r in reports]).mean()
                if not torch.isfinite(total):
                    raise TrainingDivergedError(f"non-finite loss: {_dump_nan(out_dir, step, batch, items)}")
                opt.zero_grad()
                total.backward()
                opt.step()
                step += 1
                rec = {"step": step, "epoch": epoch, "lr": opt.param_groups[0]["lr"]}
                for key in ("l_ang", "l_norm", "l_r", "l_t", "l_pc"):
                    rec[key] = float(torch.stack([getattr(r, key).detach() for r in reports]).mean())
                rec["total"] = float(total.detach())
                history.append(rec)
                if metrics_file is not None and step % tc.log_every == 0:
                    metrics_file.write(json.dumps(rec) + "\n")
                if on_step is not None:
                    on_step(step, rec)
                if tc.max_steps is not None and step >= tc.max_steps:
                    done = True
                    break
            epoch += 1
            sched.step()
            if out_dir is not None:
                _checkpoint(model, cfg, opt, sched, step, epoch).save(out_dir / "checkpoint.pt")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    model.eval()
    ckpt = _checkpoint(model, cfg, opt, sched, step, epoch)
    return TrainResult(ckpt, model, history, pool, skipped)


def _checkpoint(model, cfg, opt, sched, step, epoch) -> Checkpoint:
    return Checkpoint(
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        config=cfg.to_dict(),
        optimizer_state=opt.state_dict(),
        scheduler_state=sched.state_dict(),
        step=step,
        epoch=epoch,
    )


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class RegimeResult:
    label: str
    noise: NoiseSpec
    n: int
    mean: dict[str, float]
    std: dict[str, float]
    skipped: int = 0


@dataclass
class EvalReport:
    """Per-regime means and population standard deviations (ddof=0) per column."""

    regimes: list[RegimeResult]
    seed: int
    trials_per_sample: int
    forward_passes: int = 0
    trials: int = 0

    columns = REPORT_COLUMNS

    def to_rows(self) -> list[dict]:
        rows = []
        for r in self.regimes:
            row = {"regime": r.label, "max_trans_m": r.noise.max_trans, "max_rot_deg": r.noise.max_rot, "n": r.n}
            for c in REPORT_COLUMNS:
                row[f"{c}_mean"] = r.mean[c]
                row[f"{c}_std"] = r.std[c]
            rows.append(row)
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.to_rows()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'Noise':<18}{'n':>5}" + "".join(f"{c:>15}" for c in ("E_t(cm)", "E_R(°)", *REPORT_COLUMNS[:6]))
        lines = [
            "Translation in cm, rotation in degrees (intrinsic Z-Y-X Euler of R_pred R_gt^T).",
            "Cells are mean ± population std over trials.",
            head,
        ]
        order = ("E_t", "E_R", *REPORT_COLUMNS[:6])
        for r in self.regimes:
            cells = "".join(f"{r.mean[c]:>8.3f}±{r.std[c]:<6.3f}" for c in order)
            lines.append(f"{r.label:<18}{r.n:>5}{cells}")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "eval_report.csv").write_text(self.to_csv())
        (out_dir / "eval_report.txt").write_text(self.to_text() + "\n")


def _aggregate(label: str, spec: NoiseSpec, errors: list[CalibrationError], skipped: int) -> RegimeResult:
    if not errors:
        raise RuntimeError(f"no successful trials for regime {label}")
    table = np.array([[e.row()[c] for c in REPORT_COLUMNS] for e in errors])
    mean = dict(zip(REPORT_COLUMNS, table.mean(axis=0).tolist()))
    std = dict(zip(REPORT_COLUMNS, table.std(axis=0).tolist()))
    return RegimeResult(label, spec, len(errors), mean, std, skipped)


def trial_rng(seed: int, regime: int, sample: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, regime, sample, trial]))


def predict_correction(model: CalibrationModel, item: Prepared, t_init: Pose) -> Pose:
    """One forward pass -> T_pred."""
    with torch.no_grad():
        pred = model(item.voxels, item.sample.frame, t_init)
    return assemble_prediction(pred)


def evaluate(
    model: Optional[CalibrationModel],
    samples: Sequence[Sample],
    regimes: Sequence[NoiseSpec],
    trials_per_sample: int = 1,
    seed: int = 0,
    cfg: Optional[RunConfig] = None,
    oracle: bool = False,
    noise_draws: Optional[list[list[Pose]]] = None,
    train_noise: Optional[NoiseSpec] = None,
) -> EvalReport:
    """Single-pass evaluation: fresh T_delta per (sample, trial), one prediction
    each, T_gt recovered as T_pred^-1 T_init.

    ``oracle`` injects the supervision target instead of running the model.
    ``noise_draws`` replaces the random draws (one regime; used to score a
    fixed training pool).
    """
    if cfg is None:
        if model is None:
            raise ValueError("need a model or a config")
        cfg = model.cfg
    items = prepare(samples, cfg, seed)
    if model is not None:
        model.eval()
    if train_noise is not None:
        for r in regimes:
            if r.max_trans > train_noise.max_trans or r.max_rot > train_noise.max_rot:
                warnings.warn(f"regime {r.label} exceeds the training noise range {train_noise.label}")
    calls_before = model.forward_calls if model is not None else 0
    results = []
    n_trials = 0
    for ri, spec in enumerate(regimes):
        errors, skipped = [], 0
        for si, item in enumerate(items):
            draws = noise_draws[si] if noise_draws is not None else None
            count = len(draws) if draws is not None else trials_per_sample
            for tj in range(count):
                t_delta = draws[tj] if draws is not None else sample_noise(spec, trial_rng(seed, ri, si, tj))
                t_gt = item.sample.t_gt
                t_init = make_initial(t_gt, t_delta)
                n_trials += 1
                if oracle:
                    t_pred = supervision_target(t_init, t_gt)
                else:
                    try:
                        t_pred = predict_correction(model, item, t_init)
                    except EmptySelectionError:
                        skipped += 1
                        continue
                errors.append(compute_metrics(recover_extrinsic(t_pred, t_init), t_gt))
        results.append(_aggregate(spec.label, spec, errors, skipped))
    passes = (model.forward_calls - calls_before) if model is not None else 0
    return EvalReport(results, seed, trials_per_sample, forward_passes=passes, trials=n_trials)


def evaluate_checkpoint(ckpt: Checkpoint, samples, regimes, trials_per_sample=1, seed=0) -> EvalReport:
    cfg = ckpt.run_config
    return evaluate(ckpt.build_model(), samples, regimes, trials_per_sample, seed, cfg, train_noise=cfg.noise)


# --------------------------------------------------------------------------
# single frame
# --------------------------------------------------------------------------


def calibrate_frame(model: CalibrationModel, sample: Sample, t_init: Pose) -> tuple[Pose, Optional[CalibrationError]]:
    item = prepare([sample], model.cfg)[0]
    try:
        t_pred = predict_correction(model, item, t_init)
    except EmptySelectionError as exc:
        raise EmptySelectionError(
            f"{sample.scene_id}: T_init sends every frustum point outside the "
            f"{model.grid.x_cells}x{model.grid.y_cells} BEV grid (cell {model.grid.cell_size} m); "
            "the initial extrinsic is too far off for this grid"
        ) from exc
    estimate = recover_extrinsic(t_pred, t_init)
    err = compute_metrics(estimate, sample.t_gt) if sample.t_gt is not None else None
    return estimate, err


def format_pose(p: Pose) -> str:
    tup = " ".join(f"{v:.9f}" for v in p.to_tuple())
    mat = "\n".join(" ".join(f"{v: .9f}" for v in row) for row in p.as_matrix())
    return f"qw qx qy qz tx ty tz: {tup}\n{mat}"


# --------------------------------------------------------------------------
# overlay
# --------------------------------------------------------------------------


@dataclass
class Overlay:
    path: Optional[Path]
    pixels: np.ndarray  # (M, 2) integer (u, v) of drawn points
    depth: np.ndarray  # (M,) camera z of the drawn points
    image: np.ndarray  # (H, W, 3) uint8


def project_cloud(points: np.ndarray, extrinsic: Pose, K: np.ndarray):
    cam = extrinsic.apply(points)
    front = cam[:, 2] > 0
    cam = cam[front]
    uvw = cam @ np.asarray(K)[:3, :3].T
    uv = uvw[:, :2] / uvw[:, 2:3]
    return uv, cam[:, 2]


def depth_colors(depth: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    from matplotlib import colormaps

    x = np.clip((depth - d_min) / max(d_max - d_min, 1e-9), 0, 1)
    return (colormaps["jet"](x)[:, :3] * 255).astype(np.uint8)


def render_overlay(sample: Sample, extrinsic: Pose, out=None) -> Overlay:
    """Draw the cloud, seen through ``extrinsic`` and K, over the image.

    Each pixel keeps its nearest point (z-buffer); points with z <= 0 are never drawn.
    """
    from PIL import Image

    img = (np.clip(sample.frame.image, 0, 1) * 255).round().astype(np.uint8).copy()
    h, w = img.shape[:2]
    uv, z = project_cloud(sample.cloud.points, extrinsic, sample.frame.K)
    px = np.round(uv).astype(np.int64)
    inside = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    px, z = px[inside], z[inside]
    if px.shape[0] == 0:
        warnings.warn(f"{sample.scene_id}: no LiDAR point projects into the image")
    # nearest point per pixel wins
    order = np.lexsort((z, px[:, 1] * w + px[:, 0]))
    flat = (px[:, 1] * w + px[:, 0])[order]
    first = np.ones(flat.shape[0], dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    keep = order[first]
    px, z = px[keep], z[keep]
    if z.size:
        img[px[:, 1], px[:, 0]] = depth_colors(z, float(z.min()), float(z.max()))
    path = None
    if out is not None:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img, mode="RGB").save(path)
    return Overlay(path, px, z, img)
