import numpy as np
import pytest
import torch
from hypothesis import settings, strategies as st

from lidarcam.geometry import Pose

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

torch.set_num_threads(1)


@st.composite
def unit_quats(draw):
    v = np.array(draw(st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4)))
    if np.linalg.norm(v) < 1e-3:
        v = np.array([1.0, 0.0, 0.0, 0.0])
    return v / np.linalg.norm(v)


@st.composite
def poses(draw, max_trans=5.0):
    q = draw(unit_quats())
    t = draw(st.lists(st.floats(-max_trans, max_trans, allow_nan=False), min_size=3, max_size=3))
    return Pose(q, np.array(t))


def random_pose(rng, max_trans=2.0):
    q = rng.normal(size=4)
    return Pose(q / np.linalg.norm(q), rng.uniform(-max_trans, max_trans, 3))


def homog(R, t):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_rel_error(fn, x: torch.Tensor, eps: float = 1e-6, idx=None) -> float:
    """Relative error between autograd and central finite differences of scalar ``fn`` at ``x``.

    ``idx`` restricts the check to some flat coordinates.
    """
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    g = g.reshape(-1)
    coords = range(x.numel()) if idx is None else idx
    num, ana = [], []
    with torch.no_grad():
        for i in coords:
            xp, xm = x.detach().clone().reshape(-1), x.detach().clone().reshape(-1)
            xp[i] += eps
            xm[i] -= eps
            num.append((fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))).item() / (2 * eps))
            ana.append(g[i].item())
    num, ana = np.array(num), np.array(ana)
    return float(np.linalg.norm(num - ana) / max(np.linalg.norm(num), 1e-12))


TINY_CONFIG = {
    "grid": {"cell_size": 1.0, "x_cells": 16, "y_cells": 16, "z_bins": 2, "z_min": -2.0, "z_max": 2.0, "range": 8.0},
    "depth": {"d_min": 1.0, "d_max": 8.0, "bins": 4},
    "model": {"n_l": 4, "n_c": 8, "n_b": 16, "voxel_hidden": 4, "image_hidden": 4, "attn_layers": 1},
    "noise": {"max_trans": 0.5, "max_rot": 5.0},
    "optim": {"lr": 1e-3, "step_size": 5},
    "train": {"batch_size": 2, "epochs": 2, "max_points": 2048},
}


def tiny_config(**sections):
    from lidarcam.data_io.config import config_from_dict

    data = {k: dict(v) for k, v in TINY_CONFIG.items()}
    for k, v in sections.items():
        data.setdefault(k, {}).update(v)
    return config_from_dict(data)


def tiny_samples(n=2, **spec):
    from lidarcam.data_io.synthetic import SyntheticSceneSpec, generate_synthetic

    kw = dict(rings=16, azimuth_step=2.0, image_hw=(32, 64))
    kw.update(spec)
    return [generate_synthetic(SyntheticSceneSpec(seed=s, **kw)) for s in range(n)]


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
