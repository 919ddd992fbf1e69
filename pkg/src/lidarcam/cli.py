"""Command-line entry point: ``lidarcam <verb> [--config C] [--seed S] [--out O]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data_io.config import ConfigError, RunConfig, config_from_dict, dump_config, load_config
from .data_io.kitti import load_kitti_sequence
from .data_io.synthetic import SyntheticSceneSpec, load_manifest, write_manifest
from .geometry import EVAL_REGIMES, NoiseSpec, Pose, make_initial, sample_noise

log = logging.getLogger("lidarcam")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg = cfg.replace(train={"seed": args.seed})
    return cfg


def load_samples(data: str, cfg: RunConfig, split: str = "train"):
    """``data`` is a synthetic manifest (.json) or a KITTI root; KITTI uses the config's split."""
    path = Path(data)
    if path.suffix == ".json":
        return load_manifest(path)
    sequences = cfg.data.train if split == "train" else cfg.data.test
    samples = []
    for seq in sequences:
        samples.extend(load_kitti_sequence(path, seq))
    return samples


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_synth(args) -> int:
    seed = args.seed or 0
    specs = [SyntheticSceneSpec(seed=seed + i) for i in range(args.count)]
    out = _out(args, "runs/synth")
    write_manifest(out / "manifest.json", specs)
    print(f"wrote {len(specs)} scenes to {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    from .harness import train

    cfg = _config(args)
    if args.steps is not None:
        cfg = cfg.replace(train={"max_steps": args.steps})
    out = _out(args, "runs/train")
    dump_config(cfg, out / "config.yaml")
    samples = load_samples(args.data, cfg, "train")

    def on_step(step, rec):
        if step % max(cfg.train.log_every, 1) == 0:
            log.info("step %d  total %.5f  l_r %.5f  l_t %.5f  l_pc %.5f", step, rec["total"], rec["l_r"], rec["l_t"], rec["l_pc"])

    res = train(cfg, samples, out_dir=out, on_step=on_step)
    res.checkpoint.save(out / "checkpoint.pt")
    print(f"final loss {res.final_loss:.6f} after {res.checkpoint.step} steps; checkpoint {out / 'checkpoint.pt'}")
    return 0


def _regimes(args) -> list[NoiseSpec]:
    if not args.regime:
        return list(EVAL_REGIMES)
    out = []
    for r in args.regime:
        trans, rot = r.split(",")
        out.append(NoiseSpec(float(trans), float(rot)))
    return out


def cmd_eval(args) -> int:
    from .harness import Checkpoint, evaluate_checkpoint

    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.run_config
    samples = load_samples(args.data, cfg, args.split)
    rep = evaluate_checkpoint(ckpt, samples, _regimes(args), args.trials, args.seed or 0)
    out = _out(args, "runs/eval")
    rep.write(out)
    print(rep.to_text())
    return 0


def _initial(args, sample, cfg: RunConfig) -> Pose:
    if getattr(args, "t_init", None):
        return Pose.from_text(Path(args.t_init).read_text())
    if sample.t_gt is None:
        raise SystemExit("no --t-init given and the sample has no ground truth to perturb")
    rng = np.random.default_rng(args.seed or 0)
    return make_initial(sample.t_gt, sample_noise(cfg.noise, rng))


def _pick(args, cfg):
    samples = load_samples(args.data, cfg, args.split)
    if not 0 <= args.index < len(samples):
        raise SystemExit(f"--index {args.index} out of range for {len(samples)} samples")
    return samples[args.index]


def cmd_calibrate(args) -> int:
    from .harness import Checkpoint, calibrate_frame, format_pose

    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    sample = _pick(args, model.cfg)
    t_init = _initial(args, sample, model.cfg)
    estimate, err = calibrate_frame(model, sample, t_init)
    print(f"scene {sample.scene_id}")
    print(format_pose(estimate))
    if err is not None:
        print(json.dumps({k: round(v, 6) for k, v in err.row().items()}))
    if args.out:
        out = _out(args, "runs/calibrate")
        (out / "extrinsic.txt").write_text(estimate.to_text() + "\n")
    return 0


def cmd_overlay(args) -> int:
    from .harness import render_overlay

    cfg = _config(args)
    sample = _pick(args, cfg)
    if args.extrinsic:
        extrinsic = Pose.from_text(Path(args.extrinsic).read_text())
    elif args.noisy:
        extrinsic = _initial(args, sample, cfg)
    else:
        extrinsic = sample.t_gt
    out = Path(args.out or "runs/overlay.png")
    if out.suffix != ".png":
        out = out / f"overlay_{args.index:06d}.png"
    ov = render_overlay(sample, extrinsic, out)
    print(f"drew {len(ov.depth)} points to {ov.path}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all(seed=args.seed or 0) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lidarcam", description="BEV LiDAR-camera extrinsic calibration")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="YAML run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.set_defaults(fn=fn)
        return p

    p = verb("gen-synth", cmd_gen_synth, "write a synthetic scene manifest")
    p.add_argument("--count", type=int, default=8)

    p = verb("train", cmd_train, "train a model")
    p.add_argument("--data", required=True, help="manifest.json or KITTI root")
    p.add_argument("--steps", type=int, default=None)

    for name, fn, help_ in (
        ("eval", cmd_eval, "evaluate a checkpoint over noise regimes"),
        ("calibrate", cmd_calibrate, "calibrate one frame"),
    ):
        p = verb(name, fn, help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=("train", "test"), default="test")
        if name == "eval":
            p.add_argument("--trials", type=int, default=1)
            p.add_argument("--regime", action="append", help="'max_trans_m,max_rot_deg'; repeatable")
        else:
            p.add_argument("--index", type=int, default=0)
            p.add_argument("--t-init", default=None, help="pose text file (16, 12 or 7 values)")

    p = verb("overlay", cmd_overlay, "project the point cloud onto the image")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--extrinsic", default=None, help="pose text file; default is ground truth")
    p.add_argument("--noisy", action="store_true", help="use a perturbed ground truth instead")

    verb("selftest", cmd_selftest, "run the built-in oracle and gradient checks")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
