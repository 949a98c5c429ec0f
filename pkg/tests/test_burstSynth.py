import numpy as np
import pytest

from burstSynth import (DegenerateSceneError, MeshBehindCameraError, SceneSpec, TremorSpec, burst_consistency_residual,
                        gt_parallax, height_field, make_burst, make_scene, raycast_oracle, render_frame, sample_tremor,
                        tremor_variance_factor)
from cameraModel import Pose, pose_at
from sceneModel import pixel_grid, plane_depth
from SensorModel.SensorSimulator import SensorConfig


def small_spec(**kw):
    base = dict(width=16, height=12, mesh_step=4.0, sigma=0.15, amplitude=0.1, bump_count=2, texture_cell=6.0,
                octaves=2, seed=5)
    base.update(kw)
    return SceneSpec(**base)


@pytest.mark.parametrize("pose", [
    Pose.identity(),
    Pose(np.array([0.01, -0.005, 0.002]), np.array([0.02, -0.01, 0.01])),
])
def test_rasterizer_matches_raycast_oracle(pose):
    scene = make_scene(small_spec())
    image, depth = render_frame(scene, pose)
    image_o, depth_o = raycast_oracle(scene, pose)
    np.testing.assert_array_equal(np.isfinite(depth), np.isfinite(depth_o))
    assert np.isfinite(depth).all()
    np.testing.assert_allclose(depth, depth_o, atol=1e-9)
    np.testing.assert_allclose(image, image_o, atol=1e-9)


def test_flat_scene_renders_plane_depth():
    for normal in [(0.0, 0.0, 1.0), (0.2, -0.1, 1.0)]:
        spec = small_spec(amplitude=0.0, z0=1.5, normal=normal)
        scene = make_scene(spec)
        K = scene.intrinsics
        expected = plane_depth(scene.plane, K, pixel_grid(K.width, K.height)).reshape(K.height, K.width)
        np.testing.assert_allclose(scene.depth.depths, expected, atol=1e-9)
        assert not scene.mask.any()
        assert scene.bumps == []


def test_single_bump_at_principal_point():
    spec = small_spec(width=17, height=13, bumps=[{"center": [0.0, 0.0], "sigma": 0.1, "height": 0.2}])
    scene = make_scene(spec)
    K = scene.intrinsics
    cx, cy = int(K.cx), int(K.cy)
    assert scene.depth.depths[cy, cx] == pytest.approx(0.8, abs=1e-12)
    assert scene.mask[cy, cx]
    assert height_field(scene.bumps, np.zeros((1, 2)))[0] == pytest.approx(0.2)


def test_scene_is_seeded():
    a, b, c = make_scene(small_spec()), make_scene(small_spec()), make_scene(small_spec(seed=6))
    np.testing.assert_array_equal(a.texture, b.texture)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    assert not np.array_equal(a.texture, c.texture)


def test_grating_texture_range():
    scene = make_scene(small_spec(texture_period=8.0, contrast=0.4))
    assert scene.texture.min() >= 0.3 - 1e-12
    assert scene.texture.max() <= 0.7 + 1e-12


def test_degenerate_scenes_are_rejected():
    with pytest.raises(DegenerateSceneError):
        make_scene(small_spec(amplitude=0.6))
    with pytest.raises(DegenerateSceneError):
        make_scene(small_spec(normal=(0.0, 1.0, 0.0)))
    with pytest.raises(DegenerateSceneError):
        make_scene(small_spec(bumps=[{"center": [0, 0], "sigma": 0.0, "height": 0.1}]))


def test_render_errors():
    scene = make_scene(small_spec())
    with pytest.raises(MeshBehindCameraError):
        render_frame(scene, Pose(np.zeros(3), np.array([0.0, 0.0, -2.0])))
    with pytest.raises(ValueError):
        render_frame(scene, Pose.identity(), supersample=0)


def test_translation_shifts_fronto_plane_image():
    scene = make_scene(small_spec(width=32, height=24, amplitude=0.0, z0=2.0, mesh_step=2.0))
    K = scene.intrinsics
    t = 2.0 * 2.0 / K.fx
    ref, _ = render_frame(scene, Pose.identity())
    moved, depth = render_frame(scene, Pose(np.zeros(3), np.array([t, 0.0, 0.0])))
    np.testing.assert_allclose(moved[:, 2:], ref[:, :-2], atol=1e-9)
    np.testing.assert_allclose(depth, 2.0, atol=1e-9)


# ---------------------------------------------------------------------------
# tremor
# ---------------------------------------------------------------------------

def test_tremor_is_pinned_and_seeded():
    spec = TremorSpec(seed=3)
    traj = sample_tremor(spec)
    pose = pose_at(traj, 0.0)
    np.testing.assert_array_equal(pose.rotation, 0.0)
    np.testing.assert_array_equal(pose.translation, 0.0)
    np.testing.assert_array_equal(sample_tremor(spec).trans_ctrl, traj.trans_ctrl)
    assert not np.array_equal(sample_tremor(spec, seed=4).trans_ctrl, traj.trans_ctrl)


def test_zero_sigma_tremor_is_static():
    traj = sample_tremor(TremorSpec(sigma_t=0.0, sigma_r=0.0))
    np.testing.assert_array_equal(traj.rot_ctrl, 0.0)
    np.testing.assert_array_equal(traj.trans_ctrl, 0.0)


def test_tremor_variance_factor():
    assert tremor_variance_factor(2, 0.0) == 0.0
    assert tremor_variance_factor(2, 1.0) == 1.0
    assert tremor_variance_factor(2, 0.5) == pytest.approx(0.3125)


def test_tremor_variance_matches_monte_carlo():
    spec = TremorSpec(sigma_t=0.01, sigma_r=0.0)
    samples = np.array([pose_at(sample_tremor(spec, seed=s), 0.5).translation for s in range(2000)])
    expected = spec.sigma_t ** 2 * tremor_variance_factor(2, 0.5)
    assert samples.var() == pytest.approx(expected, rel=0.1)
    assert abs(samples.mean()) < 3 * np.sqrt(expected / samples.size) + 1e-12


def test_tremor_spec_validation():
    with pytest.raises(ValueError):
        TremorSpec(frames=1)
    with pytest.raises(ValueError):
        TremorSpec(sigma_t=-1.0)


# ---------------------------------------------------------------------------
# bursts
# ---------------------------------------------------------------------------

def test_static_burst_has_identical_frames():
    burst, gt = make_burst(small_spec(width=32, height=24), TremorSpec(frames=2, sigma_t=0.0, sigma_r=0.0),
                           SensorConfig("raw12"), threads=1)
    assert burst.frames.shape == (2, 12, 16, 4)
    np.testing.assert_array_equal(burst.frames[0], burst.frames[1])
    assert gt.depth.depths.shape == (24, 32)
    assert gt_parallax(gt, burst.taus) == 0.0
    np.testing.assert_allclose(burst.timestamps, [0.0, 2.0])


def test_rgb8_burst_shape_and_intrinsics():
    burst, gt = make_burst(small_spec(width=32, height=24), TremorSpec(frames=3), SensorConfig("rgb8"), threads=2)
    assert burst.frames.shape == (3, 24, 32, 3)
    assert burst.intrinsics == gt.intrinsics
    assert gt.mask.shape == (24, 32)


def test_burst_is_deterministic_across_thread_counts():
    args = (small_spec(width=32, height=24), TremorSpec(frames=3), SensorConfig("raw12", read_noise=0.01, seed=2))
    a, _ = make_burst(*args, threads=1)
    b, _ = make_burst(*args, threads=3)
    assert a.frames.tobytes() == b.frames.tobytes()


def test_raw12_burst_is_self_consistent():
    spec = SceneSpec(width=64, height=64, texture_cell=48.0, octaves=1, contrast=0.3, sigma=0.15, seed=1)
    burst, gt = make_burst(spec, TremorSpec(frames=4, seed=1), SensorConfig("raw12"), threads=1)
    assert gt_parallax(gt, burst.taus) > 0.0
    assert burst_consistency_residual(burst, gt) < 2e-3
