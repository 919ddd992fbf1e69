import hashlib
import json
import math
import warnings

import numpy as np
import pytest
import torch

from lidarcam.camera_branch import CameraFrame, InvalidIntrinsicsError
from lidarcam.data_io.sample import Sample
from lidarcam.data_io.synthetic import SyntheticSceneSpec, generate_synthetic
from lidarcam.geometry import EVAL_REGIMES, NoiseSpec, Pose, make_initial
from lidarcam.ggbd import EmptySelectionError
from lidarcam.harness import (
    REPORT_COLUMNS,
    Checkpoint,
    TrainingDivergedError,
    calibrate_frame,
    evaluate,
    evaluate_checkpoint,
    format_pose,
    render_overlay,
    train,
)
from lidarcam.lidar_branch import PointCloud
from lidarcam.model import build_model

from conftest import tiny_config, tiny_samples


@pytest.fixture(scope="module")
def samples():
    return tiny_samples(2)


@pytest.fixture(scope="module")
def trained(samples, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return train(tiny_config(train={"max_steps": 3, "batch_size": 1}), samples, out_dir=out), out


def test_one_step_smoke(samples):
    cfg = tiny_config(train={"max_steps": 1, "batch_size": 1})
    model = build_model(cfg, seed=0)
    res = train(cfg, samples[:1], model=model)
    assert len(res.history) == 1 and math.isfinite(res.final_loss)
    for name, p in model.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name


def test_train_writes_metrics_and_checkpoint(trained):
    res, out = trained
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert json.loads(lines[-1])["total"] == res.final_loss
    ck = Checkpoint.load(out / "checkpoint.pt")
    assert ck.step == 3 and ck.run_config == tiny_config(train={"max_steps": 3, "batch_size": 1})


def test_training_deterministic(samples):
    cfg = tiny_config(train={"max_steps": 3})
    a, b = train(cfg, samples), train(cfg, samples)
    assert abs(a.final_loss - b.final_loss) < 1e-6


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(tiny_config(), [])


def test_nan_loss_aborts_with_dump(samples, tmp_path):
    cfg = tiny_config(train={"max_steps": 2})
    model = build_model(cfg, seed=0)
    with torch.no_grad():
        model.fuser.proj.weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        train(cfg, samples, out_dir=tmp_path, model=model)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["step"] == 0 and dump["batch"][0]["scene_id"].startswith("synth_")


def test_checkpoint_byte_stable(trained, tmp_path):
    res, _ = trained
    res.checkpoint.save(tmp_path / "a.pt")
    Checkpoint.load(tmp_path / "a.pt").save(tmp_path / "b.pt")
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    assert digest(tmp_path / "a.pt") == digest(tmp_path / "b.pt")


def test_checkpoint_round_trip_eval(trained, samples, tmp_path):
    res, _ = trained
    res.checkpoint.save(tmp_path / "c.pt")
    regimes = [NoiseSpec(0.5, 5.0)]
    a = evaluate(res.model, samples, regimes, trials_per_sample=2, seed=4)
    b = evaluate_checkpoint(Checkpoint.load(tmp_path / "c.pt"), samples, regimes, trials_per_sample=2, seed=4)
    assert a.to_csv() == b.to_csv()


def test_checkpoint_version_checked(trained, tmp_path):
    res, _ = trained
    res.checkpoint.version = 99
    res.checkpoint.save(tmp_path / "v.pt")
    res.checkpoint.version = 1
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "v.pt")


def test_oracle_injection_gives_zero_report(samples):
    rep = evaluate(None, samples, list(EVAL_REGIMES), trials_per_sample=3, cfg=tiny_config(), oracle=True)
    for r in rep.regimes:
        assert max(abs(v) for c, v in r.mean.items() if c in ("X", "Y", "Z", "E_t")) < 1e-9
        assert max(r.mean[c] for c in ("Roll", "Pitch", "Yaw", "E_R")) < 1e-6


def test_report_columns_layout_and_norms(trained, samples):
    res, _ = trained
    rep = evaluate(res.model, samples, [NoiseSpec(0.5, 5.0), NoiseSpec(0.2, 20.0)], trials_per_sample=2, seed=1)
    assert set(rep.columns) == {"X", "Y", "Z", "Roll", "Pitch", "Yaw", "E_t", "E_R"}
    header = rep.to_csv().splitlines()[0].split(",")
    assert [h for h in header if h.endswith("_mean")] == [f"{c}_mean" for c in REPORT_COLUMNS]
    assert "Roll" in rep.to_text() and "population std" in rep.to_text()
    assert rep.forward_passes == rep.trials == 8
    assert len(rep.regimes) == 2 and all(r.n == 4 for r in rep.regimes)


def test_evaluation_deterministic(trained, samples):
    res, _ = trained
    a = evaluate(res.model, samples, [NoiseSpec(0.5, 5.0)], trials_per_sample=3, seed=9)
    b = evaluate(res.model, samples, [NoiseSpec(0.5, 5.0)], trials_per_sample=3, seed=9)
    assert a.to_csv() == b.to_csv()


def test_out_of_range_regime_warns(trained, samples):
    res, _ = trained
    with pytest.warns(UserWarning, match="exceeds"):
        evaluate(res.model, samples, [NoiseSpec(1.5, 20.0)], cfg=res.model.cfg, train_noise=NoiseSpec(0.5, 5.0))


def test_report_write(trained, samples, tmp_path):
    res, _ = trained
    rep = evaluate(res.model, samples, [NoiseSpec(0.5, 5.0)])
    rep.write(tmp_path)
    assert (tmp_path / "eval_report.csv").read_text() == rep.to_csv()


def test_metric_norms_per_row(trained, samples):
    from lidarcam.geometry import compute_metrics, recover_extrinsic
    from lidarcam.harness import predict_correction, prepare, trial_rng
    from lidarcam.geometry import sample_noise

    res, _ = trained
    item = prepare(samples, res.model.cfg)[0]
    t_init = make_initial(item.sample.t_gt, sample_noise(NoiseSpec(0.5, 5.0), trial_rng(0, 0, 0, 0)))
    err = compute_metrics(recover_extrinsic(predict_correction(res.model, item, t_init), t_init), item.sample.t_gt)
    row = err.row()
    assert row["E_t"] == pytest.approx(math.sqrt(row["X"] ** 2 + row["Y"] ** 2 + row["Z"] ** 2))
    assert row["E_R"] == pytest.approx(math.sqrt(row["Roll"] ** 2 + row["Pitch"] ** 2 + row["Yaw"] ** 2))


# -- calibrate ---------------------------------------------------------------


def test_calibrate_frame_output_parses_back(trained, samples):
    res, _ = trained
    s = samples[0]
    est, err = calibrate_frame(res.model, s, make_initial(s.t_gt, Pose(translation=np.array([0.1, 0, 0]))))
    assert err is not None and np.isfinite(err.e_t)
    text = format_pose(est)
    first, *rows = text.splitlines()
    tup = Pose.from_text(first.split(":", 1)[1])
    mat = Pose.from_text(" ".join(rows))
    np.testing.assert_allclose(tup.as_matrix(), est.as_matrix(), atol=1e-8)
    np.testing.assert_allclose(mat.as_matrix(), est.as_matrix(), atol=1e-8)
    np.testing.assert_allclose(Pose.from_text(est.to_text()).as_matrix(), est.as_matrix(), atol=1e-15)


def test_calibrate_degenerate_init(trained, samples):
    res, _ = trained
    far = Pose(translation=np.array([500.0, 0, 0]))
    with pytest.raises(EmptySelectionError, match="too far off"):
        calibrate_frame(res.model, samples[0], far)


def test_malformed_intrinsics_surface_field_path(samples):
    with pytest.raises(InvalidIntrinsicsError, match=r"frame\.K"):
        Sample(CameraFrame(samples[0].frame.image, np.diag([-1.0, 1, 1])), samples[0].cloud, samples[0].t_gt, "bad")


# -- overlay -----------------------------------------------------------------


def test_overlay_known_point(tmp_path):
    K = np.array([[50.0, 0, 31.5], [0, 50.0, 15.5], [0, 0, 1]])
    # identity extrinsic: lidar frame == camera frame
    pts = np.array([[0.4, -0.2, 4.0], [0.0, 0.0, 2.0]])
    s = Sample(CameraFrame(np.zeros((32, 64, 3)), K), PointCloud(pts), Pose.identity(), "pt")
    ov = render_overlay(s, Pose.identity(), tmp_path / "o.png")
    assert ov.path.is_file()
    want_u, want_v = 50 * 0.4 / 4 + 31.5, 50 * -0.2 / 4 + 15.5
    drawn = {tuple(p) for p in ov.pixels.tolist()}
    assert any(abs(u - want_u) <= 1 and abs(v - want_v) <= 1 for u, v in drawn)
    u, v = ov.pixels[np.argmax(ov.depth)]
    assert ov.image[v, u].any()


def test_overlay_never_draws_behind_camera(tmp_path):
    K = np.array([[50.0, 0, 31.5], [0, 50.0, 15.5], [0, 0, 1]])
    pts = np.array([[0.0, 0.0, -3.0], [0.1, 0.1, 0.0]])
    s = Sample(CameraFrame(np.zeros((32, 64, 3)), K), PointCloud(pts), Pose.identity(), "behind")
    with pytest.warns(UserWarning, match="no LiDAR point"):
        ov = render_overlay(s, Pose.identity(), tmp_path / "b.png")
    assert len(ov.depth) == 0 and not ov.image.any()


def test_overlay_depth_matches_render():
    # collocated camera so that LiDAR and camera see the same first surfaces
    spec = SyntheticSceneSpec(seed=2, cam_trans=(0.0, 0.0, 0.0), rings=64, azimuth_step=0.5, image_hw=(96, 192))
    s = generate_synthetic(spec)
    ov = render_overlay(s, s.t_gt)
    u, v = ov.pixels[:, 0], ov.pixels[:, 1]
    rendered = s.depth[v, u]
    # skip pixels on depth discontinuities, where rounding to a pixel center can cross an edge
    pad = np.pad(s.depth, 1, mode="edge")
    nb = np.stack([pad[1 + dv : 1 + dv + s.depth.shape[0], 1 + du : 1 + du + s.depth.shape[1]] for dv in (-1, 0, 1) for du in (-1, 0, 1)])
    smooth = (nb.max(0) - nb.min(0)) <= 0.05 * np.maximum(s.depth, 1e-9)
    ok = smooth[v, u] & (rendered > 0)
    assert ok.sum() > 200
    rel = np.abs(ov.depth[ok] - rendered[ok]) / rendered[ok]
    assert rel.max() < 0.02
