"""Quick built-in checks against independent oracles; ``lidarcam selftest`` runs them."""

from __future__ import annotations

import math
import time

import numpy as np
import torch

from .bev_grid import BEVGrid
from .camera_branch import Frustum, InvalidBinCountError, bev_pool, depth_bins
from .geometry import NoiseSpec, Pose, compute_metrics, make_initial, recover_extrinsic, sample_noise, supervision_target
from .ggbd import select_features
from .losses import geodesic_angle, reprojection_loss, rotation_loss, translation_loss, pose_matrix


def random_pose(rng: np.random.Generator, max_trans: float = 2.0) -> Pose:
    q = rng.normal(size=4)
    return Pose(q / np.linalg.norm(q), rng.uniform(-max_trans, max_trans, 3))


def check_chain(rng, n=200):
    worst_r = worst_t = 0.0
    for _ in range(n):
        t_gt = random_pose(rng)
        t_init = make_initial(t_gt, sample_noise(NoiseSpec(1.5, 20.0), rng))
        err = compute_metrics(recover_extrinsic(supervision_target(t_init, t_gt), t_init), t_gt)
        worst_r, worst_t = max(worst_r, err.e_r), max(worst_t, err.e_t / 100.0)
    return worst_r < 1e-7 and worst_t < 1e-9, f"worst {worst_r:.2e} deg, {worst_t:.2e} m"


def check_gradients(rng, n=10):
    ok = True
    for _ in range(n):
        r = torch.tensor(rng.normal(size=4), dtype=torch.float64, requires_grad=True)
        t = torch.tensor(rng.normal(size=3), dtype=torch.float64, requires_grad=True)
        r_hat = torch.tensor(rng.normal(size=4), dtype=torch.float64)
        t_hat = torch.tensor(rng.normal(size=3), dtype=torch.float64)
        pts = torch.tensor(rng.normal(size=(16, 3)) * 5, dtype=torch.float64)
        t_gt = torch.tensor(random_pose(rng).as_matrix())
        t_init = torch.tensor(random_pose(rng).as_matrix())
        ok &= torch.autograd.gradcheck(lambda r: rotation_loss(r, r_hat)[2], (r,), raise_exception=False)
        ok &= torch.autograd.gradcheck(lambda t: translation_loss(t, t_hat), (t,), raise_exception=False)
        ok &= torch.autograd.gradcheck(
            lambda r, t: reprojection_loss(pts, t_gt, pose_matrix(r, t), t_init), (r, t), raise_exception=False
        )
    return bool(ok), f"{n} configurations"


def check_geodesic(rng):
    one = torch.tensor([1.0, 0, 0, 0], dtype=torch.float64)
    z90 = torch.tensor([math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)], dtype=torch.float64)
    zero = float(geodesic_angle(one, one)) == 0.0
    quarter = abs(float(geodesic_angle(z90, one)) - math.pi / 2) < 1e-9
    a = torch.tensor(rng.normal(size=(1000, 4)))
    b = torch.tensor(rng.normal(size=(1000, 4)))
    a, b = a / a.norm(dim=1, keepdim=True), b / b.norm(dim=1, keepdim=True)
    ang = geodesic_angle(a, b)
    in_range = bool(((ang >= 0) & (ang <= math.pi)).all())
    sign = bool(torch.allclose(ang, geodesic_angle(-a, b), atol=1e-12))
    return zero and quarter and in_range and sign, "identity, 90 deg, range, sign"


def check_depth_bins(rng):
    exact = depth_bins(1.0, 9.0, 5).tolist() == [1.0, 3.0, 5.0, 7.0, 9.0]
    try:
        depth_bins(1.0, 9.0, 1)
        rejected = False
    except InvalidBinCountError:
        rejected = True
    return exact and rejected, "(1, 9, 5) and D=1"


def check_pool_and_select(rng, n=20):
    grid = BEVGrid(cell_size=0.5, x_cells=16, y_cells=16, z_bins=2, z_min=-2.0, z_max=2.0, range=6.0)
    ok = True
    for _ in range(n):
        pos = torch.tensor(rng.uniform(-5, 5, size=(4, 8, 8, 3)))
        feats = torch.tensor(rng.normal(size=(4, 8, 8, 3)))
        fr = Frustum(feats, pos, pos)
        want = torch.zeros(3, 16, 16, dtype=torch.float64)
        cells = set()
        for p, f in zip(pos.reshape(-1, 3).tolist(), feats.reshape(-1, 3)):
            ix, iy = math.floor(p[0] / 0.5) + 8, math.floor(p[1] / 0.5) + 8
            if 0 <= ix < 16 and 0 <= iy < 16:
                cells.add((ix, iy))
                if -2.0 <= p[2] < 2.0:
                    want[:, ix, iy] += f
        ok &= bool(torch.equal(bev_pool(fr, grid), want))
        sel = select_features(pos, torch.zeros(4, 16, 16), grid)
        ok &= {tuple(c) for c in sel.positions.tolist()} == cells and len(sel) == len(cells)
    return bool(ok), f"{n} frustums"


CHECKS = {
    "algebraic chain": check_chain,
    "loss gradients": check_gradients,
    "geodesic values": check_geodesic,
    "depth bins": check_depth_bins,
    "bev pool / selection": check_pool_and_select,
}


def run_all(seed: int = 0, verbose: bool = True) -> bool:
    rng = np.random.default_rng(seed)
    all_ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        ok, detail = fn(rng)
        all_ok &= ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name:<22} {detail} ({time.perf_counter() - t0:.2f}s)")
    return all_ok
