"""Overfit the toy model on 8 synthetic scenes and report training-set recovery error.

    python scripts/overfit_demo.py --config configs/toy.yaml --steps 3000 --selector geometry
"""

import argparse
import json
import time

import torch

from lidarcam.data_io.config import load_config
from lidarcam.data_io.synthetic import rig_scenes
from lidarcam.harness import evaluate, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/toy.yaml")
    ap.add_argument("--scenes", type=int, default=8)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--selector", default=None)
    ap.add_argument("--pool", type=int, default=None)
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = load_config(args.config)
    train_kw, model_kw, optim_kw = {}, {}, {}
    if args.steps:
        train_kw["max_steps"] = args.steps
    if args.seed is not None:
        train_kw["seed"] = args.seed
    if args.pool is not None:
        train_kw["noise_pool"] = args.pool
    if args.selector:
        model_kw["selector"] = args.selector
    if args.lr:
        optim_kw["lr"] = args.lr
    cfg = cfg.replace(train=train_kw, model=model_kw, optim=optim_kw)
    samples = rig_scenes(args.scenes, rig_seed=0)  # one sensor rig shared by every scene

    t0 = time.time()

    def on_step(step, rec):
        if step % 50 == 0:
            print(json.dumps({k: round(v, 5) if isinstance(v, float) else v for k, v in rec.items()}), flush=True)

    res = train(cfg, samples, out_dir=args.out, on_step=on_step)
    rep = evaluate(res.model, samples, [cfg.noise], cfg=cfg, noise_draws=res.noise_pool) if res.noise_pool else None
    if rep is not None:
        print("training-pool recovery:")
        print(rep.to_text())
    fresh = evaluate(res.model, samples, [cfg.noise], trials_per_sample=4, seed=123, cfg=cfg)
    print("fresh-noise recovery:")
    print(fresh.to_text())
    print(f"elapsed {time.time() - t0:.1f}s, final loss {res.final_loss:.6f}")


if __name__ == "__main__":
    main()
