import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

import diffMath as dm
from cameraModel import Intrinsics, ray_direction
from depthEval import DepthMap

"""
@Data: 2025/5/14
@Desc: 隐式 RGB-D 场景表示：坐标编码图像 MLP + 平面加偏移深度 MLP
"""

logger = logging.getLogger(__name__)

EPS_PARALLEL = 1e-6
# depth barrier: z_min + softplus(k·(x − z_min)/d_p)·d_p/k
BARRIER_SHARPNESS = 40.0
BARRIER_FRACTION = 0.05
RENDER_CHUNK = 65536

CHECKPOINT_MAGIC = b"TDPT"
CHECKPOINT_VERSION = 1


class DegenerateRayError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class EncodingConfig:
    num_bands: int = 8
    include_raw: bool = True
    alpha: float = 0.0

    def __post_init__(self):
        if self.num_bands < 1:
            raise ValueError(f"num_bands must be ≥ 1, got {self.num_bands}")
        if not 0.0 <= self.alpha <= self.num_bands:
            raise ValueError(f"alpha must lie in [0, {self.num_bands}], got {self.alpha}")

    @property
    def feature_length(self) -> int:
        return (2 if self.include_raw else 0) + 4 * self.num_bands


@dataclass
class PlaneParams:
    normal_raw: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset: float = 1.0

    def __post_init__(self):
        self.normal_raw = np.asarray(self.normal_raw, dtype=np.float64)
        if self.offset <= 0:
            raise ValueError(f"plane offset must be positive, got {self.offset}")

    @property
    def unit_normal(self) -> np.ndarray:
        return dm.value_of(unit_normal(self.normal_raw))


@dataclass
class Mlp:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("an Mlp needs one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} != {self.weights[i - 1].shape[1]}")

    @property
    def widths(self) -> List[int]:
        return [w.shape[0] for w in self.weights] + [self.weights[-1].shape[1]]


@dataclass
class ModelConfig:
    intrinsics: Intrinsics
    channels: int
    num_bands: int = 8
    include_raw: bool = True
    image_layers: int = 4
    image_width: int = 128
    depth_layers: int = 4
    depth_width: int = 64


@dataclass
class SceneModel:
    image_mlp: Mlp
    depth_mlp: Mlp
    plane: PlaneParams
    encoding: EncodingConfig
    intrinsics: Intrinsics
    depth_alpha: Optional[float] = None
    # set when the image model is pinned to the reference frame
    reference_image: Optional[np.ndarray] = None

    @property
    def channels(self) -> int:
        if self.reference_image is not None:
            return self.reference_image.shape[2]
        return self.image_mlp.widths[-1]

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for prefix, mlp in (("image_mlp", self.image_mlp), ("depth_mlp", self.depth_mlp)):
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                params[f"{prefix}.w{i}"] = w
                params[f"{prefix}.b{i}"] = b
        params["plane.normal_raw"] = self.plane.normal_raw
        params["plane.offset"] = np.array([self.plane.offset])
        return params

    def with_parameters(self, values: Mapping[str, np.ndarray]) -> "SceneModel":
        merged = dict(self.parameters())
        merged.update({k: np.array(dm.value_of(v)) for k, v in values.items()})

        def rebuild(prefix, mlp):
            n = len(mlp.weights)
            return Mlp([merged[f"{prefix}.w{i}"] for i in range(n)], [merged[f"{prefix}.b{i}"] for i in range(n)])

        return replace(
            self,
            image_mlp=rebuild("image_mlp", self.image_mlp),
            depth_mlp=rebuild("depth_mlp", self.depth_mlp),
            plane=PlaneParams(merged["plane.normal_raw"], float(merged["plane.offset"][0])),
        )

    def offset_map(self, K: Intrinsics, resolution: Tuple[int, int]) -> np.ndarray:
        """|depth_at − plane_depth| on a (width, height) grid."""
        width, height = resolution
        pixels = _resample_pixels(self.intrinsics, width, height)
        out = np.empty(len(pixels))
        for start in range(0, len(pixels), RENDER_CHUNK):
            chunk = pixels[start:start + RENDER_CHUNK]
            out[start:start + len(chunk)] = dm.value_of(depth_at(self, K, chunk)) - dm.value_of(plane_depth(self.plane, K, chunk))
        return np.abs(out).reshape(height, width)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def window_weight(k: int, alpha: float) -> float:
    x = alpha - k
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    return (1.0 - math.cos(math.pi * x)) / 2.0


def normalize_pixels(K: Intrinsics, pixels) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    sx = 2.0 / max(K.width - 1, 1)
    sy = 2.0 / max(K.height - 1, 1)
    return np.stack([p[..., 0] * sx - 1.0, p[..., 1] * sy - 1.0], axis=-1)


def encode(pixel, cfg: EncodingConfig, alpha: Optional[float] = None) -> np.ndarray:
    """Windowed positional features of normalized (u, v); shape (..., cfg.feature_length)."""
    p = np.asarray(pixel, dtype=np.float64)
    alpha = cfg.alpha if alpha is None else alpha
    u, v = p[..., 0], p[..., 1]
    feats = [u, v] if cfg.include_raw else []
    for k in range(cfg.num_bands):
        w = window_weight(k, alpha)
        freq = (2.0 ** k) * math.pi
        feats += [w * np.sin(freq * u), w * np.cos(freq * u), w * np.sin(freq * v), w * np.cos(freq * v)]
    return np.stack(feats, axis=-1)


# ---------------------------------------------------------------------------
# depth / color
# ---------------------------------------------------------------------------

def _as_batch(pixel) -> Tuple[np.ndarray, bool]:
    p = np.asarray(pixel, dtype=np.float64)
    if p.ndim == 1:
        return p[None, :], True
    return p, False


def _finish(out, single: bool):
    if single:
        return dm.reshape(out, ()) if isinstance(out, dm.DTensor) else out.reshape(())
    return out


def _param(scene: SceneModel, params: Optional[Mapping[str, Any]], name: str):
    if params is not None and name in params:
        return params[name]
    return scene.parameters()[name]


def _mlp_apply(scene, params, prefix: str, mlp: Mlp, x: np.ndarray):
    n = len(mlp.weights)
    h = x
    for i in range(n):
        h = dm.matmul(h, _param(scene, params, f"{prefix}.w{i}")) + _param(scene, params, f"{prefix}.b{i}")
        if i < n - 1:
            h = dm.softplus(h)
    return h


def unit_normal(normal_raw):
    n = normal_raw if isinstance(normal_raw, dm.DTensor) else dm.lift(normal_raw)
    norm_sq = float(np.sum(n.data * n.data))
    if norm_sq < 1e-24:
        raise DegenerateRayError("plane normal has zero length")
    sign = 1.0 if n.data[2] >= 0 else -1.0
    return dm.lower(n * (sign / dm.sqrt(dm.sum(n * n))), normal_raw)


def plane_depth(plane: PlaneParams, K: Intrinsics, pixel, params: Optional[Mapping[str, Any]] = None,
                eps_parallel: float = EPS_PARALLEL):
    """z-depth d_p / (n̂·r) of the plane along each pixel ray."""
    pts, single = _as_batch(pixel)
    normal_raw = params["plane.normal_raw"] if params and "plane.normal_raw" in params else plane.normal_raw
    offset = params["plane.offset"] if params and "plane.offset" in params else np.array([plane.offset])
    n = unit_normal(normal_raw)
    ndotr = dm.matmul(ray_direction(K, pts), n)
    bad = dm.value_of(ndotr) <= eps_parallel
    if np.any(bad):
        raise DegenerateRayError(f"{int(bad.sum())} ray(s) parallel to or behind the plane")
    out = dm.div(offset, ndotr)
    return _finish(dm.lower(out, normal_raw, offset), single)


def depth_offset(scene: SceneModel, pixel, params: Optional[Mapping[str, Any]] = None,
                 alpha: Optional[float] = None):
    pts, single = _as_batch(pixel)
    if alpha is None:
        alpha = scene.depth_alpha if scene.depth_alpha is not None else scene.encoding.alpha
    feats = encode(normalize_pixels(scene.intrinsics, pts), scene.encoding, alpha)
    out = dm.take(_mlp_apply(scene, params, "depth_mlp", scene.depth_mlp, feats), 0, axis=1)
    return _finish(out if params else out.data, single)


def depth_at(scene: SceneModel, K: Intrinsics, pixel, params: Optional[Mapping[str, Any]] = None,
             alpha: Optional[float] = None, barrier: bool = True):
    """Plane depth plus learned offset, kept above 0.05·d_p by a smooth barrier."""
    pts, single = _as_batch(pixel)
    pre = dm.add(plane_depth(scene.plane, K, pts, params), depth_offset(scene, pts, params, alpha))
    if barrier:
        d_p = float(dm.value_of(_param(scene, params, "plane.offset"))[0])
        z_min = BARRIER_FRACTION * d_p
        x = (pre - z_min) * (BARRIER_SHARPNESS / d_p)
        pre = dm.softplus(x) * (d_p / BARRIER_SHARPNESS) + z_min
    return _finish(pre if params else pre.data, single)


def color_at(scene: SceneModel, pixel, params: Optional[Mapping[str, Any]] = None,
             alpha: Optional[float] = None):
    pts, single = _as_batch(pixel)
    if scene.reference_image is not None:
        out, _ = dm.bilinear_sample(scene.reference_image, pts)
    else:
        feats = encode(normalize_pixels(scene.intrinsics, pts), scene.encoding, alpha)
        out = dm.sigmoid(_mlp_apply(scene, params, "image_mlp", scene.image_mlp, feats))
    if single:
        out = dm.take(out, 0, axis=0)
    return out if params else out.data


# ---------------------------------------------------------------------------
# init / render
# ---------------------------------------------------------------------------

def _init_mlp(rng: np.random.Generator, widths: List[int], zero_last: bool) -> Mlp:
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        last = i == len(widths) - 2
        if last and zero_last:
            weights.append(np.zeros((fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        else:
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            biases.append(np.zeros(fan_out) if last else rng.uniform(-bound, bound, fan_out))
    return Mlp(weights, biases)


def init_scene(cfg: ModelConfig, rng_seed: int = 0) -> SceneModel:
    encoding = EncodingConfig(cfg.num_bands, cfg.include_raw, 0.0)
    feat = encoding.feature_length
    image_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([rng_seed, 0])))
    depth_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([rng_seed, 1])))
    image_mlp = _init_mlp(image_rng, [feat] + [cfg.image_width] * cfg.image_layers + [cfg.channels], zero_last=False)
    depth_mlp = _init_mlp(depth_rng, [feat] + [cfg.depth_width] * cfg.depth_layers + [1], zero_last=True)
    return SceneModel(image_mlp, depth_mlp, PlaneParams(), encoding, cfg.intrinsics)


def pixel_grid(width: int, height: int) -> np.ndarray:
    us, vs = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack([us.ravel(), vs.ravel()], axis=1)


def _resample_pixels(K: Intrinsics, width: int, height: int) -> np.ndarray:
    """Render-grid pixel centers mapped onto the model's reference pixel grid."""
    grid = pixel_grid(width, height)
    if (width, height) == (K.width, K.height):
        return grid
    grid[:, 0] = (grid[:, 0] + 0.5) * K.width / width - 0.5
    grid[:, 1] = (grid[:, 1] + 0.5) * K.height / height - 0.5
    return grid


def render_maps(scene: SceneModel, K: Optional[Intrinsics] = None,
                resolution: Optional[Tuple[int, int]] = None) -> Tuple[DepthMap, np.ndarray]:
    K = scene.intrinsics if K is None else K
    width, height = resolution if resolution is not None else (K.width, K.height)
    if width < 1 or height < 1:
        raise ValueError(f"resolution must be positive, got {width}x{height}")
    pixels = _resample_pixels(K, width, height)
    depths = np.empty(len(pixels))
    colors = np.empty((len(pixels), scene.channels))
    for start in range(0, len(pixels), RENDER_CHUNK):
        chunk = pixels[start:start + RENDER_CHUNK]
        depths[start:start + len(chunk)] = depth_at(scene, K, chunk)
        colors[start:start + len(chunk)] = color_at(scene, chunk)
    depth = DepthMap(depths.reshape(height, width))
    return depth, colors.reshape(height, width, scene.channels)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def _write_array(f, name: str, arr: np.ndarray):
    raw_name = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<I", len(raw_name)))
    f.write(raw_name)
    f.write(struct.pack("<I", 3))
    f.write(b"f64")
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def _read_array(f) -> Tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, name_len).decode("utf-8")
    (dtype_len,) = struct.unpack("<I", _read_exact(f, 4))
    dtype = _read_exact(f, dtype_len)
    if dtype != b"f64":
        raise CheckpointError(f"{name}: unsupported dtype {dtype!r}")
    (ndim,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def save_checkpoint(scene: SceneModel, path: str) -> None:
    K = scene.intrinsics
    arrays = dict(scene.parameters())
    arrays["meta.encoding"] = np.array([
        scene.encoding.num_bands,
        1.0 if scene.encoding.include_raw else 0.0,
        scene.encoding.alpha,
        -1.0 if scene.depth_alpha is None else scene.depth_alpha,
    ])
    arrays["meta.intrinsics"] = np.array([K.fx, K.fy, K.cx, K.cy, K.width, K.height], dtype=np.float64)
    if scene.reference_image is not None:
        arrays["meta.reference_image"] = scene.reference_image

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name in sorted(arrays):
            _write_array(f, name, arrays[name])
    logger.info("Saved checkpoint with %d arrays to %s", len(arrays), path)


def load_checkpoint(path: str) -> SceneModel:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a TDPT checkpoint")
        version, count = struct.unpack("<II", _read_exact(f, 8))
        if version > CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}")
        arrays = dict(_read_array(f) for _ in range(count))

    try:
        enc = arrays.pop("meta.encoding")
        k = arrays.pop("meta.intrinsics")
        reference_image = arrays.pop("meta.reference_image", None)
        intrinsics = Intrinsics(k[0], k[1], k[2], k[3], int(k[4]), int(k[5]))

        def mlp(prefix):
            n = len([name for name in arrays if name.startswith(f"{prefix}.w")])
            return Mlp([arrays[f"{prefix}.w{i}"] for i in range(n)], [arrays[f"{prefix}.b{i}"] for i in range(n)])

        return SceneModel(
            image_mlp=mlp("image_mlp"),
            depth_mlp=mlp("depth_mlp"),
            plane=PlaneParams(arrays["plane.normal_raw"], float(arrays["plane.offset"][0])),
            encoding=EncodingConfig(int(enc[0]), bool(enc[1]), float(enc[2])),
            intrinsics=intrinsics,
            depth_alpha=None if enc[3] < 0 else float(enc[3]),
            reference_image=reference_image,
        )
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e
