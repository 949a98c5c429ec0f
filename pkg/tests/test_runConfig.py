import json

import pytest

from runConfig import (RESOLVED_FILE, THREADS_ENV, ConfigError, RunConfig, apply_overrides, config_from_dict,
                       load_config, resolve_threads, write_resolved)


def test_defaults():
    cfg = load_config(None)
    assert cfg.to_dict() == RunConfig().to_dict()
    assert cfg.fit.iterations == 20000
    assert cfg.sensor.mode == "raw12"
    assert cfg.eval.align and cfg.eval.use_object_mask


def test_partial_sections_keep_defaults():
    cfg = config_from_dict({"fit": {"iterations": 50, "loss_kind": "l2"}, "scene": {"z0": 2, "normal": [0, 0.1, 1]}})
    assert cfg.fit.iterations == 50
    assert cfg.fit.batch_size == 1024
    assert cfg.scene.z0 == 2.0 and isinstance(cfg.scene.z0, float)
    assert cfg.scene.normal == (0.0, 0.1, 1.0)


@pytest.mark.parametrize("data, path", [
    ({"fit": {"learning_rate": 1.0}}, "fit.learning_rate"),
    ({"fit": {"iterations": "100"}}, "fit.iterations"),
    ({"fit": {"iterations": True}}, "fit.iterations"),
    ({"eval": {"align": 1}}, "eval.align"),
    ({"scene": {"normal": [0, 1]}}, "scene.normal"),
    ({"render": {}}, "render"),
    ({"scene": {"bumps": [{"center": [0, 0], "sigma": 0.1}]}}, "scene.bumps[0]"),
    ({"scene": {"bumps": [{"center": [0, "x"], "sigma": 0.1, "height": 0.1}]}}, "scene.bumps[0].center[1]"),
    ({"scene": {"amplitude": 0.9}}, "scene"),
    ({"fit": {"loss_kind": "huber"}}, "fit"),
    ({"tremor": {"frames": 1}}, "tremor"),
    ({"sensor": "raw12"}, "sensor"),
])
def test_invalid_configs_name_the_offending_key(data, path):
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert info.value.path == path


def test_load_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{\"fit\": ")
    with pytest.raises(ConfigError):
        load_config(str(broken))
    listing = tmp_path / "list.json"
    listing.write_text("[]")
    with pytest.raises(ConfigError):
        load_config(str(listing))


def test_overrides_fold_into_sections():
    cfg = apply_overrides(load_config(None), seed=7, iterations=10, mode="rgb8", fix_image_frame0=True,
                          align=False, pose=True, cull_ratio=5.0, object_mask=False, out_dir="runs/x")
    assert (cfg.scene.seed, cfg.tremor.seed, cfg.sensor.seed, cfg.fit.seed) == (7, 7, 7, 7)
    assert cfg.fit.iterations == 10
    assert cfg.sensor.mode == "rgb8"
    assert cfg.fit.fix_image_to_frame0
    assert not cfg.eval.align and cfg.eval.pose
    assert cfg.eval.cull_ratio == 5.0
    assert not cfg.eval.use_object_mask
    assert cfg.out.dir == "runs/x"

    untouched = apply_overrides(load_config(None))
    assert untouched.to_dict() == load_config(None).to_dict()
    with pytest.raises(ConfigError):
        apply_overrides(load_config(None), mode="jpeg")


def test_resolved_config_reloads_identically(tmp_path):
    cfg = config_from_dict({"scene": {"bumps": [{"center": [0.1, -0.1], "sigma": 0.05, "height": 0.08}]},
                            "fit": {"depth_ramp_fraction": 0.5}})
    path = write_resolved(cfg, str(tmp_path))
    assert path.endswith(RESOLVED_FILE)
    data = json.load(open(path))
    assert set(data) == {"scene", "tremor", "sensor", "fit", "eval", "out"}
    assert load_config(path).to_dict() == cfg.to_dict()


def test_resolve_threads(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads(3) == 3
    assert resolve_threads() >= 1
    monkeypatch.setenv(THREADS_ENV, "5")
    assert resolve_threads() == 5
    assert resolve_threads(2) == 2
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        resolve_threads()
    with pytest.raises(ConfigError):
        resolve_threads(0)
