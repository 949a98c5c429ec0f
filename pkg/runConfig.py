import argparse
import dataclasses
import json
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from burstSynth import DegenerateSceneError, SceneSpec, TremorSpec
from burstTrainer import FitConfig
from SensorModel.SensorSimulator import SensorConfig

"""
@Data: 2025/5/25
@Desc: 运行配置：一个 JSON 文档 {scene, tremor, sensor, fit, eval, out}，严格校验并回写解析后的完整配置
"""

logger = logging.getLogger(__name__)

RESOLVED_FILE = "resolved_config.json"
THREADS_ENV = "TREMOR_DEPTH_THREADS"
BUMP_KEYS = {"center", "sigma", "height"}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class EvalOptions:
    align: bool = True
    pose: bool = False
    pose_samples: int = 16
    cull_ratio: float = 10.0
    use_object_mask: bool = True
    segmentation_threshold_fraction: float = 0.02

    def __post_init__(self):
        if self.cull_ratio <= 0:
            raise ValueError("cull_ratio must be positive")
        if self.pose_samples < 2:
            raise ValueError("pose_samples must be ≥ 2")
        if self.segmentation_threshold_fraction < 0:
            raise ValueError("segmentation_threshold_fraction must be ≥ 0")


@dataclass
class OutputOptions:
    dir: str = "runs/default"


SECTIONS = {
    "scene": SceneSpec,
    "tremor": TremorSpec,
    "sensor": SensorConfig,
    "fit": FitConfig,
    "eval": EvalOptions,
    "out": OutputOptions,
}


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    tremor: TremorSpec = field(default_factory=TremorSpec)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    out: OutputOptions = field(default_factory=OutputOptions)

    def to_dict(self) -> Dict[str, Any]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _coerce(path: str, value: Any, tp: Any) -> Any:
    origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(path, value, inner[0])
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(path, f"expected a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(f"{path}[{i}]", v, a) for i, (v, a) in enumerate(zip(value, args)))
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return [_coerce(f"{path}[{i}]", v, args[0]) for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {value!r}")
        return dict(value)
    raise ConfigError(path, f"unsupported field type {tp}")


def _build_section(name: str, cls, data: Any):
    if not isinstance(data, dict):
        raise ConfigError(name, "section must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        kwargs[key] = _coerce(f"{name}.{key}", value, hints[key])
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(name, str(e)) from e


def _check_scene(scene: SceneSpec) -> None:
    for i, bump in enumerate(scene.bumps or []):
        keys = set(bump)
        if keys != BUMP_KEYS:
            raise ConfigError(f"scene.bumps[{i}]", f"bump needs exactly {sorted(BUMP_KEYS)}, got {sorted(keys)}")
        _coerce(f"scene.bumps[{i}].center", bump["center"], typing.Tuple[float, float])
        _coerce(f"scene.bumps[{i}].sigma", bump["sigma"], float)
        _coerce(f"scene.bumps[{i}].height", bump["height"], float)
    try:
        scene.validate()
    except DegenerateSceneError as e:
        raise ConfigError("scene", str(e)) from e


def config_from_dict(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(key, f"unknown section (expected one of {list(SECTIONS)})")
    cfg = RunConfig(**{name: _build_section(name, cls, data.get(name, {})) for name, cls in SECTIONS.items()})
    _check_scene(cfg.scene)
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    """Parse a run config; None gives the documented defaults."""
    if path is None:
        return config_from_dict({})
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(path, "config file not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(path, f"invalid JSON ({e.msg} at line {e.lineno})") from e
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, seed: Optional[int] = None, iterations: Optional[int] = None,
                    mode: Optional[str] = None, fix_image_frame0: Optional[bool] = None,
                    align: Optional[bool] = None, pose: Optional[bool] = None,
                    cull_ratio: Optional[float] = None, object_mask: Optional[bool] = None,
                    out_dir: Optional[str] = None) -> RunConfig:
    """Fold command-line flags into the config; None leaves a field untouched."""
    data = cfg.to_dict()
    if seed is not None:
        for section in ("scene", "tremor", "sensor", "fit"):
            data[section]["seed"] = seed
    if iterations is not None:
        data["fit"]["iterations"] = iterations
    if mode is not None:
        data["sensor"]["mode"] = mode
    if fix_image_frame0 is not None:
        data["fit"]["fix_image_to_frame0"] = fix_image_frame0
    if align is not None:
        data["eval"]["align"] = align
    if pose is not None:
        data["eval"]["pose"] = pose
    if cull_ratio is not None:
        data["eval"]["cull_ratio"] = cull_ratio
    if object_mask is not None:
        data["eval"]["use_object_mask"] = object_mask
    if out_dir is not None:
        data["out"]["dir"] = out_dir
    return config_from_dict(data)


def write_resolved(cfg: RunConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESOLVED_FILE)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def resolve_threads(flag: Optional[int] = None) -> int:
    if flag is not None:
        if flag < 1:
            raise ConfigError("--threads", f"must be ≥ 1, got {flag}")
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError as e:
            raise ConfigError(THREADS_ENV, f"expected an integer, got {env!r}") from e
        if value < 1:
            raise ConfigError(THREADS_ENV, f"must be ≥ 1, got {value}")
        return value
    return os.cpu_count() or 1


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="校验配置并打印默认值补全后的结果")
    parser.add_argument("--config", "-c", default=None, help="JSON 配置文件，缺省时输出默认配置")
    args = parser.parse_args()

    print(json.dumps(load_config(args.config).to_dict(), indent=2, sort_keys=True))
