import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from lidarcam.bev_grid import BEVGrid
from lidarcam.geometry import InvalidRotationError, quat_to_matrix
from lidarcam.ggbd import (
    GGBD,
    AttentionBlock,
    EmptySelectionError,
    ExtrinsicPrediction,
    MultiHeadSelfAttention,
    PoseHeads,
    SelectedFeatures,
    add_positional_embedding,
    assemble_prediction,
    project_to_bev,
    select_features,
    sinusoidal_embedding,
)

from conftest import fd_rel_error

G128 = BEVGrid(cell_size=0.5, x_cells=128, y_cells=128, z_bins=2, z_min=-2, z_max=2, range=50)
G16 = BEVGrid(cell_size=0.5, x_cells=16, y_cells=16, z_bins=2, z_min=-2, z_max=2, range=6)


def test_project_examples():
    assert project_to_bev((0, 0, 3.0), G128)[:2] == (64, 64)
    assert project_to_bev((10.2, -3.7, 1.0), G128) == (84, 56, True)
    assert project_to_bev((-0.01, 0, 0), G128)[0] == 63
    assert project_to_bev((100.0, 0, 0), G128)[2] is False


def brute_force_cells(pos, grid):
    cells = set()
    for x, y, _ in pos.reshape(-1, 3).tolist():
        ix, iy = math.floor(x / grid.cell_size) + grid.x_cells // 2, math.floor(y / grid.cell_size) + grid.y_cells // 2
        if 0 <= ix < grid.x_cells and 0 <= iy < grid.y_cells:
            cells.add((ix, iy))
    return cells


def test_select_one_cell():
    pos = torch.full((4, 8, 8, 3), 0.1, dtype=torch.float64)
    assert len(select_features(pos, torch.zeros(3, 16, 16), G16)) == 1


def test_select_matches_brute_force(rng):
    fused = torch.tensor(rng.normal(size=(5, 16, 16)))
    for _ in range(20):
        pos = torch.tensor(rng.uniform(-6, 6, size=(4, 8, 8, 3)))
        sel = select_features(pos, fused, G16)
        got = [tuple(p) for p in sel.positions.tolist()]
        assert len(got) == len(set(got)) and set(got) == brute_force_cells(pos, G16)
        for (ix, iy), f in zip(got, sel.features):
            assert torch.equal(f, fused[:, ix, iy])
        assert len(sel) <= min(16 * 16, pos.numel() // 3)


def test_select_all_and_empty():
    g = BEVGrid(cell_size=0.5, x_cells=64, y_cells=64, z_bins=1, z_min=-1, z_max=1, range=20)
    assert len(select_features(torch.zeros(1, 3), torch.zeros(2, 64, 64), g, "all")) == 4096
    with pytest.raises(EmptySelectionError):
        select_features(torch.full((3, 3), 99.0), torch.zeros(2, 64, 64), g)
    with pytest.raises(ValueError):
        select_features(torch.zeros(1, 3), torch.zeros(2, 64, 64), g, "nearest")


def test_embedding_properties():
    pos = torch.tensor([[3, 4], [3, 4], [0, 0], [63, 12]])
    emb = sinusoidal_embedding(pos, 64, torch.float64)
    assert torch.equal(emb[0], emb[1])
    torch.testing.assert_close(emb.norm(dim=1), torch.full((4,), math.sqrt(32.0), dtype=torch.float64))
    assert not torch.equal(emb[0], emb[2])
    sel = SelectedFeatures(pos, torch.zeros(4, 64, dtype=torch.float64))
    assert torch.equal(add_positional_embedding(sel, G16).features, emb)


@given(st.lists(st.tuples(st.integers(0, 255), st.integers(0, 255)), min_size=1, max_size=20))
def test_embedding_norm_constant(cells):
    emb = sinusoidal_embedding(torch.tensor(cells), 32, torch.float64)
    torch.testing.assert_close(emb.norm(dim=1), torch.full((len(cells),), 4.0, dtype=torch.float64))


def test_single_token_attention():
    torch.manual_seed(0)
    attn = MultiHeadSelfAttention(8, 4).double()
    attn.keep_weights = True
    x = torch.randn(1, 8, dtype=torch.float64)
    y = attn(x)
    assert torch.equal(attn.last_weights, torch.ones(4, 1, 1, dtype=torch.float64))
    torch.testing.assert_close(y, attn.out(attn.v(x)))


def test_attention_rows_sum_to_one_and_paths_agree():
    torch.manual_seed(0)
    attn = MultiHeadSelfAttention(16, 4)
    x = torch.randn(30, 16)
    fast = attn(x)
    attn.keep_weights = True
    slow = attn(x)
    torch.testing.assert_close(attn.last_weights.sum(-1), torch.ones(4, 30), atol=1e-6, rtol=0)
    torch.testing.assert_close(fast, slow, atol=1e-5, rtol=1e-5)


@given(st.integers(0, 2**31 - 1))
def test_attention_permutation_equivariant(seed):
    torch.manual_seed(0)
    blk = AttentionBlock(16, 4).double()
    x = torch.randn(12, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    perm = torch.randperm(12, generator=torch.Generator().manual_seed(seed + 1))
    torch.testing.assert_close(blk(x[perm]), blk(x)[perm])


def test_heads_pool_and_shapes():
    torch.manual_seed(0)
    heads = PoseHeads(8).double()
    tok = torch.randn(8, dtype=torch.float64)
    a = heads(tok.expand(5, 8))
    b = heads(tok[None])
    assert a.rotation_raw.shape == (4,) and a.translation.shape == (3,)
    torch.testing.assert_close(a.rotation_raw, b.rotation_raw)
    with pytest.raises(EmptySelectionError):
        heads(torch.zeros(0, 8, dtype=torch.float64))


def test_heads_start_near_identity():
    torch.manual_seed(0)
    pred = PoseHeads(16)(torch.randn(10, 16))
    assert abs(float(pred.rotation_raw[0].detach()) - 1) < 0.3
    assert float(pred.translation.detach().abs().max()) < 0.3


def test_heads_gradient_fd():
    torch.manual_seed(0)
    heads = PoseHeads(8).double()
    x = torch.randn(6, 8, dtype=torch.float64)
    w = torch.randn(7, dtype=torch.float64)

    def fn(x):
        p = heads(x)
        return (torch.cat([p.rotation_raw, p.translation]) * w).sum()

    assert fd_rel_error(fn, x) < 1e-4


def test_assemble_prediction():
    p = assemble_prediction(ExtrinsicPrediction(torch.tensor([1.0, 0, 0, 0]), torch.zeros(3)))
    np.testing.assert_array_equal(p.as_matrix(), np.eye(4))
    p = assemble_prediction(ExtrinsicPrediction(torch.tensor([2.0, 0, 0, 0]), torch.tensor([1.0, 2, 3])))
    np.testing.assert_array_equal(p.R, np.eye(3))
    np.testing.assert_array_equal(p.translation, [1, 2, 3])
    r = torch.tensor([0.3, -0.4, 0.5, 0.2], dtype=torch.float64)
    t = torch.tensor([0.1, 0.2, -0.3], dtype=torch.float64)
    want = np.eye(4)
    want[:3, :3] = quat_to_matrix(r.numpy())
    want[:3, 3] = t.numpy()
    np.testing.assert_allclose(assemble_prediction(ExtrinsicPrediction(r, t)).as_matrix(), want, atol=1e-12)
    with pytest.raises(InvalidRotationError):
        assemble_prediction(ExtrinsicPrediction(torch.zeros(4), torch.zeros(3)))


def test_output_invariant_to_selection_order(rng):
    torch.manual_seed(0)
    dec = GGBD(G16, dim=16, layers=2, heads=4).double()
    fused = torch.tensor(rng.normal(size=(16, 16, 16)))
    pos = torch.tensor(rng.uniform(-4, 4, size=(64, 3)))
    sel = add_positional_embedding(select_features(pos, fused, G16), G16)
    perm = torch.from_numpy(rng.permutation(len(sel)))
    a = dec.heads(dec.refiner(sel.features))
    b = dec.heads(dec.refiner(sel.features[perm]))
    torch.testing.assert_close(a.rotation_raw, b.rotation_raw, atol=1e-6, rtol=0)
    torch.testing.assert_close(a.translation, b.translation, atol=1e-6, rtol=0)
    # the full forward as well, with the frustum points reordered
    c = dec(pos[torch.from_numpy(rng.permutation(64))], fused)
    torch.testing.assert_close(a.translation, c.translation, atol=1e-6, rtol=0)


def test_ggbd_rejects_unknown_mode():
    with pytest.raises(ValueError):
        GGBD(G16, 16, mode="random")
