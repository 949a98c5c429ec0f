"""Long synthetic end-to-end runs. Deselected by default; run with `pytest -m acceptance`."""
import json
import os
from dataclasses import replace

import numpy as np
import pytest

from artifactHasher import DEFAULT_EXCLUDES, ArtifactHasher, identical
from burstSynth import SceneSpec, TremorSpec, burst_consistency_residual, gt_parallax, make_burst
from burstTrainer import FitConfig, fit
from depthEval import depth_metrics, mask_iou, plane_segmentation, pose_error
from runConfig import RESOLVED_FILE
from sceneModel import render_maps
from SensorModel.SensorSimulator import SensorConfig
from tremorDepth import EXIT_OK, full_resolution, main

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
NOISY = dict(read_noise=0.01, shot_gain=1e-3)


def run(scene_spec, tremor_spec, sensor_cfg, fit_cfg, mask=False):
    burst, gt = make_burst(scene_spec, tremor_spec, sensor_cfg)
    if sensor_cfg.read_noise == 0 and sensor_cfg.shot_gain == 0 and sensor_cfg.mode == "raw12":
        assert burst_consistency_residual(burst, gt) < 2e-3
    scene, traj, _ = fit(burst, fit_cfg, progress=False)
    K_full = full_resolution(burst.intrinsics, burst.mode)
    depth, _ = render_maps(scene, burst.intrinsics, (K_full.width, K_full.height))
    report = depth_metrics(depth, gt.depth, gt.mask if mask else None)
    return report, scene, traj, gt


def median_abs_rel(scene_spec, tremor_spec, sensor_cfg, fit_cfg):
    values = []
    for seed in SEEDS:
        report, *_ = run(replace(scene_spec, seed=seed), replace(tremor_spec, seed=seed),
                         replace(sensor_cfg, seed=seed), replace(fit_cfg, seed=seed), mask=True)
        values.append(report.abs_rel)
    return float(np.median(values))


def test_plane_recovery():
    spec = SceneSpec(amplitude=0.0)
    report, scene, traj, gt = run(spec, TremorSpec(), SensorConfig("raw12"), FitConfig())
    assert 1.0 < gt_parallax(gt, np.linspace(0, 1, 16)) < 5.0
    assert report.abs_rel < 0.01
    angle = np.degrees(np.arccos(np.clip(scene.plane.unit_normal @ gt.plane.unit_normal, -1.0, 1.0)))
    assert angle < 2.0
    assert pose_error(traj, gt.trajectory).direction_deg_mean < 10.0


def test_height_field_recovery():
    spec = SceneSpec()
    report, scene, _, gt = run(spec, TremorSpec(), SensorConfig("raw12"), FitConfig(), mask=True)
    assert report.abs_rel < 0.05
    plane_z = scene.plane.offset / scene.plane.unit_normal[2]
    mask = plane_segmentation(scene, scene.intrinsics, (gt.intrinsics.width, gt.intrinsics.height),
                              spec.mask_threshold_fraction * plane_z)
    assert mask_iou(mask, gt.mask) > 0.7


def test_raw_beats_processed_rgb():
    spec, tremor, cfg = SceneSpec(), TremorSpec(), FitConfig()
    raw = median_abs_rel(spec, tremor, SensorConfig("raw12", **NOISY), cfg)
    rgb = median_abs_rel(spec, tremor, SensorConfig("rgb8", **NOISY), cfg)
    assert raw <= rgb


def test_learned_image_beats_fixed_frame():
    spec, tremor, sensor = SceneSpec(), TremorSpec(), SensorConfig("raw12", **NOISY)
    learned = median_abs_rel(spec, tremor, sensor, FitConfig())
    fixed = median_abs_rel(spec, tremor, sensor, FitConfig(fix_image_to_frame0=True))
    assert learned <= fixed


def test_coarse_to_fine_helps_on_periodic_texture():
    spec, tremor, sensor = SceneSpec(texture_period=8.0), TremorSpec(), SensorConfig("raw12")
    ramp = median_abs_rel(spec, tremor, sensor, FitConfig())
    frozen = median_abs_rel(spec, tremor, sensor, FitConfig(freeze_alpha=True))
    assert ramp <= frozen


def test_pipeline_is_deterministic(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"scene": {"width": 128, "height": 128}, "tremor": {"frames": 8},
                                  "fit": {"iterations": 2000}}))
    excludes = DEFAULT_EXCLUDES + (RESOLVED_FILE,)
    manifests = []
    for name in ("a", "b"):
        burst, out = str(tmp_path / name / "burst"), str(tmp_path / name / "fit")
        assert main(["simulate", "-c", str(config), "--out", burst, "-q"]) == EXIT_OK
        assert main(["fit", "-c", str(config), "--burst", burst, "--out", out, "-q"]) == EXIT_OK
        assert main(["eval", "--pred", os.path.join(out, "depth.pfm"), "--gt", burst, "--pose"]) == EXIT_OK
        manifests.append({stage: ArtifactHasher(str(tmp_path / name / stage), excludes).collect()
                          for stage in ("burst", "fit")})
    for stage in ("burst", "fit"):
        assert identical(manifests[0][stage], manifests[1][stage])
