import json
import os

import numpy as np
import pytest
from scipy import ndimage

from burstContainer import read_ground_truth, write_container
from burstTrainer import BurstStack
from cameraModel import default_intrinsics
from depthEval import DepthMap, export_pfm, read_pfm
from tremorDepth import EXIT_INPUT, EXIT_NO_PARALLAX, EXIT_OK, main, mesh_intrinsics

SMALL = {
    "scene": {"width": 32, "height": 24, "mesh_step": 4.0, "texture_cell": 6.0, "sigma": 0.15},
    "tremor": {"frames": 3, "sigma_t": 0.0, "sigma_r": 0.0},
    "sensor": {"mode": "rgb8"},
    "fit": {"iterations": 5, "batch_size": 16, "image_layers": 1, "image_width": 8, "depth_layers": 1,
            "depth_width": 4, "num_bands": 2},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


@pytest.fixture
def container(tmp_path, config_file):
    out = str(tmp_path / "burst")
    assert main(["simulate", "-c", config_file, "--out", out, "--threads", "1", "-q"]) == EXIT_OK
    return out


def test_simulate_writes_container(container):
    for name in ("meta.json", "frame_0000.png", "frame_0002.png", "gt/depth.pfm", "gt/mask.png",
                 "gt/trajectory.json", "gt/plane.json", "resolved_config.json", "manifest.json"):
        assert os.path.exists(os.path.join(container, name)), name
    manifest = json.load(open(os.path.join(container, "manifest.json")))["files"]
    assert "meta.json" in manifest and "manifest.json" not in manifest


def test_simulate_warns_about_missing_parallax(tmp_path, config_file, caplog, capsys):
    out = str(tmp_path / "static")
    assert main(["simulate", "-c", config_file, "--out", out, "--threads", "1", "-q"]) == EXIT_OK
    assert "fit will fail" in caplog.text
    assert "max parallax: 0.00 px" in capsys.readouterr().out


def test_simulate_is_reproducible(tmp_path, config_file):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (a, b):
        assert main(["simulate", "-c", config_file, "--out", out, "--seed", "4", "--threads", "1", "-q"]) == EXIT_OK
    for name in ("frame_0001.png", "gt/depth.pfm", "meta.json"):
        assert open(os.path.join(a, name), "rb").read() == open(os.path.join(b, name), "rb").read()


def test_fit_without_parallax_exits_3(tmp_path, container, config_file):
    code = main(["fit", "-c", config_file, "--burst", container, "--out", str(tmp_path / "fit"), "-q"])
    assert code == EXIT_NO_PARALLAX


@pytest.fixture
def moving_container(tmp_path):
    rng = np.random.Generator(np.random.Philox(0))
    tex = ndimage.gaussian_filter(rng.uniform(size=(24, 32, 3)), sigma=(2.0, 2.0, 0.0), mode="wrap")
    tex = 0.1 + 0.8 * (tex - tex.min()) / np.ptp(tex)
    frames = np.stack([np.roll(tex, 2 * n, axis=1) for n in range(3)])
    out = str(tmp_path / "moving")
    write_container(out, BurstStack(frames, [0.0, 1.0, 2.0], default_intrinsics(32, 24), "rgb8"))
    return out


def test_fit_writes_outputs(tmp_path, moving_container, config_file, capsys):
    out = str(tmp_path / "fit")
    args = ["fit", "-c", config_file, "--burst", moving_container, "--out", out, "-q", "--fix-image-frame0"]
    assert main(args) == EXIT_OK
    for name in ("scene.tdpt", "trajectory.json", "depth.pfm", "image.png", "mask.png", "fit_log.jsonl",
                 "resolved_config.json", "manifest.json"):
        assert os.path.exists(os.path.join(out, name)), name
    assert json.load(open(os.path.join(out, "resolved_config.json")))["fit"]["fix_image_to_frame0"] is True
    assert read_pfm(os.path.join(out, "depth.pfm")).depths.shape == (24, 32)
    assert capsys.readouterr().out.startswith("wrote ")


def test_input_errors_exit_2(tmp_path, config_file):
    assert main(["fit", "--burst", str(tmp_path / "absent"), "--out", str(tmp_path / "fit"), "-q"]) == EXIT_INPUT

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"fit": {"iterations": "many"}}))
    assert main(["simulate", "-c", str(bad), "--out", str(tmp_path / "x"), "-q"]) == EXIT_INPUT

    degenerate = tmp_path / "degenerate.json"
    degenerate.write_text(json.dumps({"scene": {"amplitude": 5.0}}))
    assert main(["simulate", "-c", str(degenerate), "--out", str(tmp_path / "y"), "-q"]) == EXIT_INPUT


def test_eval_perfect_and_doubled(tmp_path, container, capsys):
    gt = read_ground_truth(container)
    same = str(tmp_path / "same.pfm")
    export_pfm(gt.depth, same)
    assert main(["eval", "--pred", same, "--gt", container]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "0.000/0.000"
    assert gt.mask.any()
    assert json.loads(out.split("\n", 1)[1])["valid_count"] == int(gt.mask.sum())
    assert os.path.exists(str(tmp_path / "metrics.json"))

    assert main(["eval", "--pred", same, "--gt", container, "--full-frame"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out.split("\n", 1)[1])["valid_count"] == 24 * 32

    doubled = str(tmp_path / "doubled.pfm")
    export_pfm(DepthMap(2.0 * read_pfm(same).depths), doubled)
    metrics = str(tmp_path / "doubled.json")
    assert main(["eval", "--pred", doubled, "--gt", container, "--no-align", "--metrics-out", metrics]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0] == "1.000/0.693"
    assert json.load(open(metrics))["aligned"] is False

    assert main(["eval", "--pred", doubled, "--gt", container, "--no-align", "--paper-style"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0] == "1.000/.693"


def test_eval_pose_with_ground_truth_trajectory(tmp_path, container, capsys):
    gt_dir = os.path.join(container, "gt")
    pred = str(tmp_path / "pred.pfm")
    export_pfm(read_ground_truth(container).depth, pred)
    traj = os.path.join(gt_dir, "trajectory.json")
    assert main(["eval", "--pred", pred, "--gt", container, "--pose", "--trajectory", traj]) == EXIT_OK
    report = json.loads(capsys.readouterr().out.split("\n", 1)[1])
    assert report["pose"]["rotation_deg_max"] == pytest.approx(0.0, abs=1e-9)


def test_eval_errors_exit_2(tmp_path, container):
    wrong = str(tmp_path / "wrong.pfm")
    export_pfm(DepthMap(np.ones((5, 5))), wrong)
    assert main(["eval", "--pred", wrong, "--gt", container]) == EXIT_INPUT

    flat = str(tmp_path / "flat.pfm")
    export_pfm(DepthMap(np.ones((24, 32))), flat)
    assert main(["eval", "--pred", flat, "--gt", container]) == EXIT_INPUT
    assert main(["eval", "--pred", str(tmp_path / "absent.pfm"), "--gt", container]) == EXIT_INPUT


def test_mesh_command(tmp_path, container, capsys):
    depth = str(tmp_path / "const.pfm")
    export_pfm(DepthMap(np.full((24, 32), 1.5)), depth)
    out = str(tmp_path / "m.obj")
    assert main(["mesh", "--depth", depth, "--meta", os.path.join(container, "meta.json"), "--out", out]) == EXIT_OK
    assert f"{24 * 32} vertices, {2 * 23 * 31} triangles" in capsys.readouterr().out
    assert sum(1 for line in open(out) if line.startswith("f ")) == 2 * 23 * 31

    empty = str(tmp_path / "empty.pfm")
    export_pfm(DepthMap(np.zeros((24, 32))), empty)
    assert main(["mesh", "--depth", empty, "--meta", os.path.join(container, "meta.json"),
                 "--out", str(tmp_path / "e.obj")]) == EXIT_INPUT


def test_mesh_intrinsics_rescales():
    meta = {"intrinsics": {"fx": 38.4, "fy": 38.4, "cx": 15.5, "cy": 11.5, "width": 32, "height": 24},
            "ground_truth": None}
    K = mesh_intrinsics(meta, 64, 48)
    assert (K.width, K.height) == (64, 48)
    assert K.fx == pytest.approx(76.8)
    assert mesh_intrinsics(meta, 32, 24).fx == 38.4
