"""Selector ablation: geometry-guided cell selection vs using every BEV cell.

    python scripts/ablation.py --seeds 0 1 2 --out runs/ablation.csv

Each (selector, seed) pair trains the toy config on 8 rig-sharing synthetic
scenes and reports the mean training-set recovery error.
"""

import argparse
import csv
import time

import torch

from lidarcam.data_io.config import load_config
from lidarcam.data_io.synthetic import rig_scenes
from lidarcam.harness import evaluate, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/toy.yaml")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args()
    torch.set_num_threads(1)

    base = load_config(args.config)
    if args.steps:
        base = base.replace(train={"max_steps": args.steps})
    samples = rig_scenes(8, rig_seed=0)

    rows = []
    for seed in args.seeds:
        for selector in ("geometry", "all"):
            cfg = base.replace(model={"selector": selector}, train={"seed": seed})
            t0 = time.time()
            res = train(cfg, samples)
            m = evaluate(res.model, samples, [cfg.noise], cfg=cfg, noise_draws=res.noise_pool).regimes[0].mean
            row = dict(seed=seed, selector=selector, E_t=m["E_t"], E_R=m["E_R"], seconds=time.time() - t0)
            rows.append(row)
            print(f"seed {seed}  {selector:8s}  E_t {m['E_t']:7.2f} cm  E_R {m['E_R']:6.3f} deg  ({row['seconds']:.0f} s)", flush=True)

    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
