import argparse
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from tqdm import tqdm

import diffMath as dm
from burstTrainer import BurstStack, max_parallax, reproject
from cameraModel import Intrinsics, Pose, PoseTrajectory, bernstein_basis, default_intrinsics, pose_at, ray_direction, transform
from depthEval import DepthMap
from sceneModel import PlaneParams, pixel_grid
from SensorModel.Raw12Sensor import Raw12Sensor
from SensorModel.Rgb8Sensor import Rgb8Sensor
from SensorModel.SensorSimulator import SensorConfig, SensorSimulator

"""
@Data: 2025/5/18
@Desc: 合成长连拍数据：带纹理的高度场场景、手抖轨迹、z-buffer 光栅化与传感器模拟
"""

logger = logging.getLogger(__name__)

SENSORS = {
    "raw12": Raw12Sensor,
    "rgb8": Rgb8Sensor,
}

# SeedSequence stream tags
BUMP_STREAM, TEXTURE_STREAM, TREMOR_STREAM = 0, 1, 3

INSIDE_TOL = 1e-12
CANDIDATE_BUDGET = 1 << 22


class DegenerateSceneError(ValueError):
    pass


class MeshBehindCameraError(ValueError):
    pass


@dataclass
class Bump:
    center: Tuple[float, float]
    sigma: float
    height: float


@dataclass
class SceneSpec:
    width: int = 256
    height: int = 256
    focal_scale: float = 1.2
    z0: float = 1.0
    normal: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    bump_count: int = 3
    # heights and σ in reference-ray units (x/z, y/z)
    amplitude: float = 0.1
    sigma: float = 0.06
    bumps: Optional[List[Dict[str, Any]]] = None
    texture_cell: float = 24.0
    octaves: int = 3
    contrast: float = 0.5
    texture_period: Optional[float] = None
    mesh_step: float = 2.0
    margin: float = 0.15
    mask_threshold_fraction: float = 0.02
    seed: int = 0

    def intrinsics(self) -> Intrinsics:
        return default_intrinsics(self.width, self.height, self.focal_scale)

    def validate(self) -> None:
        if self.z0 <= 0:
            raise DegenerateSceneError(f"plane depth z0 must be positive, got {self.z0}")
        if self.amplitude < 0 or self.amplitude >= 0.5 * self.z0:
            raise DegenerateSceneError(f"amplitude {self.amplitude} must lie in [0, 0.5·z0)")
        for bump in self.bumps or []:
            if abs(bump["height"]) >= 0.5 * self.z0 or bump["sigma"] <= 0:
                raise DegenerateSceneError(f"explicit bump {bump} leaves the front-of-plane regime")
        if self.width < 2 or self.height < 2 or self.mesh_step <= 0 or self.texture_cell <= 0:
            raise DegenerateSceneError("resolution, mesh_step and texture_cell must be positive")
        if self.normal[2] <= 0:
            raise DegenerateSceneError("plane normal must face the camera (n_z > 0)")


@dataclass
class TremorSpec:
    frames: int = 16
    sigma_t: float = 0.006
    sigma_r: float = 0.001
    degree: int = 2
    duration: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError(f"a burst needs at least 2 frames, got {self.frames}")
        if self.sigma_t < 0 or self.sigma_r < 0:
            raise ValueError("tremor σ must be non-negative")
        if self.degree < 1 or self.duration <= 0:
            raise ValueError("degree must be ≥ 1 and duration positive")


@dataclass
class SynthScene:
    vertices: np.ndarray
    triangles: np.ndarray
    tex_coords: np.ndarray
    texture: np.ndarray
    texture_origin: np.ndarray
    intrinsics: Intrinsics
    depth: Optional[DepthMap] = None
    mask: Optional[np.ndarray] = None
    plane: Optional[PlaneParams] = None
    bumps: List[Bump] = field(default_factory=list)


@dataclass
class GroundTruth:
    depth: DepthMap
    trajectory: PoseTrajectory
    plane: PlaneParams
    mask: np.ndarray
    intrinsics: Intrinsics


def make_sensor(cfg: SensorConfig) -> SensorSimulator:
    if cfg.mode not in SENSORS:
        raise ValueError(f"Unsupported sensor mode: {cfg.mode}. Supported modes: {list(SENSORS.keys())}")
    return SENSORS[cfg.mode](cfg)


# ---------------------------------------------------------------------------
# scene
# ---------------------------------------------------------------------------

def _bumps(spec: SceneSpec, K: Intrinsics) -> List[Bump]:
    if spec.bumps is not None:
        return [Bump(tuple(b["center"]), float(b["sigma"]), float(b["height"])) for b in spec.bumps]
    if spec.amplitude == 0 or spec.bump_count == 0:
        return []

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, BUMP_STREAM])))
    half = np.array([0.5 * (K.width - 1) / K.fx, 0.5 * (K.height - 1) / K.fy])
    bumps: List[Bump] = []
    for _ in range(1000):
        if len(bumps) == spec.bump_count:
            break
        c = rng.uniform(-0.6, 0.6, 2) * half
        if all(np.hypot(*(c - np.array(b.center))) >= 2.5 * spec.sigma for b in bumps):
            bumps.append(Bump((float(c[0]), float(c[1])), spec.sigma, spec.amplitude * rng.uniform(0.6, 1.0)))
    if len(bumps) < spec.bump_count:
        logger.warning("placed only %d of %d bumps without overlap", len(bumps), spec.bump_count)
    return bumps


def height_field(bumps: List[Bump], q: np.ndarray) -> np.ndarray:
    h = np.zeros(q.shape[:-1])
    for b in bumps:
        d2 = (q[..., 0] - b.center[0]) ** 2 + (q[..., 1] - b.center[1]) ** 2
        h += b.height * np.exp(-d2 / (2.0 * b.sigma ** 2))
    return h


def _value_noise(spec: SceneSpec, shape: Tuple[int, int]) -> np.ndarray:
    H, W = shape
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, TEXTURE_STREAM])))
    total = np.zeros((H, W, 3))
    weight = 0.0
    for o in range(spec.octaves):
        # coarse to fine; finest cell is texture_cell
        cell = spec.texture_cell * 2 ** (spec.octaves - 1 - o)
        gh, gw = int(math.ceil(H / cell)) + 3, int(math.ceil(W / cell)) + 3
        grid = rng.uniform(0.0, 1.0, (gh, gw, 3))
        up = ndimage.zoom(grid, (cell, cell, 1), order=3, mode="nearest")
        w = 0.5 ** o
        total += w * up[:H, :W]
        weight += w
    n = total / weight
    return np.clip(0.5 + 2.0 * spec.contrast * (n - 0.5), 0.0, 1.0)


def _grating(spec: SceneSpec, shape: Tuple[int, int]) -> np.ndarray:
    H, W = shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    channels = []
    for theta in (0.0, math.pi / 3, 2 * math.pi / 3):
        phase = 2 * math.pi * (xs * math.cos(theta) + ys * math.sin(theta)) / spec.texture_period
        channels.append(0.5 + 0.5 * spec.contrast * np.sin(phase))
    return np.stack(channels, axis=-1)


def texture_at(scene: SynthScene, q: np.ndarray) -> np.ndarray:
    """Linear RGB of the surface texture at reference-ray coordinates q."""
    K = scene.intrinsics
    coords = (np.asarray(q, dtype=np.float64) - scene.texture_origin) * np.array([K.fx, K.fy])
    if not len(coords):
        return np.zeros((0, scene.texture.shape[2]))
    out, _ = dm.bilinear_sample(scene.texture, coords)
    return out.data


def make_scene(spec: SceneSpec, K: Optional[Intrinsics] = None) -> SynthScene:
    spec.validate()
    K = spec.intrinsics() if K is None else K
    normal = np.asarray(spec.normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    plane = PlaneParams(normal, spec.z0 * normal[2])
    bumps = _bumps(spec, K)

    # vertex grid anchored at the principal point
    step = spec.mesh_step
    lo_u, hi_u = -spec.margin * K.width, (1 + spec.margin) * (K.width - 1)
    lo_v, hi_v = -spec.margin * K.height, (1 + spec.margin) * (K.height - 1)
    us = K.cx + step * np.arange(math.floor((lo_u - K.cx) / step), math.ceil((hi_u - K.cx) / step) + 1)
    vs = K.cy + step * np.arange(math.floor((lo_v - K.cy) / step), math.ceil((hi_v - K.cy) / step) + 1)
    U, V = np.meshgrid(us, vs)
    rays = ray_direction(K, np.stack([U, V], axis=-1))
    ndotr = rays @ normal
    if np.any(ndotr <= 1e-6):
        raise DegenerateSceneError("plane is seen edge-on within the mesh extent")
    z = plane.offset / ndotr - height_field(bumps, rays[..., :2])
    vertices = (rays * z[..., None]).reshape(-1, 3)
    tex_coords = rays[..., :2].reshape(-1, 2)

    rows, cols = U.shape
    index = np.arange(rows * cols).reshape(rows, cols)
    i1, i2, i3, i4 = index[:-1, :-1], index[1:, :-1], index[1:, 1:], index[:-1, 1:]
    triangles = np.concatenate([
        np.stack([i1, i2, i3], axis=-1).reshape(-1, 3),
        np.stack([i1, i3, i4], axis=-1).reshape(-1, 3),
    ])

    q_min = tex_coords.min(axis=0) - 2.0 / np.array([K.fx, K.fy])
    extent = (tex_coords.max(axis=0) - q_min) * np.array([K.fx, K.fy])
    tex_shape = (int(math.ceil(extent[1])) + 4, int(math.ceil(extent[0])) + 4)
    texture = _grating(spec, tex_shape) if spec.texture_period else _value_noise(spec, tex_shape)

    scene = SynthScene(vertices, triangles, tex_coords, texture, q_min, K, plane=plane, bumps=bumps)
    _, depth = render_frame(scene, Pose.identity(), K, supersample=1)
    scene.depth = DepthMap(depth)
    q_pix = ray_direction(K, pixel_grid(K.width, K.height))[:, :2]
    scene.mask = (np.abs(height_field(bumps, q_pix)) > spec.mask_threshold_fraction * spec.z0).reshape(K.height, K.width)
    logger.info("scene: %d vertices, %d triangles, %d bumps", len(vertices), len(triangles), len(bumps))
    return scene


# ---------------------------------------------------------------------------
# tremor
# ---------------------------------------------------------------------------

def sample_tremor(spec: TremorSpec, seed: Optional[int] = None) -> PoseTrajectory:
    seed = spec.seed if seed is None else seed
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, TREMOR_STREAM])))
    rot = rng.normal(0.0, 1.0, (spec.degree + 1, 3)) * spec.sigma_r
    trans = rng.normal(0.0, 1.0, (spec.degree + 1, 3)) * spec.sigma_t
    rot[0] = 0.0
    trans[0] = 0.0
    return PoseTrajectory(rot, trans)


def tremor_variance_factor(degree: int, tau: float) -> float:
    """Var(pose_at(τ)) / σ² for i.i.d. control points with the first one pinned."""
    return float(np.sum(bernstein_basis(degree, tau)[1:] ** 2))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _rasterize(cam: np.ndarray, triangles: np.ndarray, K: Intrinsics,
               attrs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Z-buffered rasterization at pixel centers with perspective-correct attributes."""
    H, W = K.height, K.width
    zbuf = np.full(H * W, np.inf)
    abuf = np.zeros((H * W, attrs.shape[1]))

    screen = np.stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy], axis=1)
    p = screen[triangles]
    xmin = np.maximum(np.ceil(p[:, :, 0].min(axis=1)), 0).astype(np.int64)
    xmax = np.minimum(np.floor(p[:, :, 0].max(axis=1)), W - 1).astype(np.int64)
    ymin = np.maximum(np.ceil(p[:, :, 1].min(axis=1)), 0).astype(np.int64)
    ymax = np.minimum(np.floor(p[:, :, 1].max(axis=1)), H - 1).astype(np.int64)
    bw, bh = xmax - xmin + 1, ymax - ymin + 1
    area = _cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    live = np.flatnonzero((bw > 0) & (bh > 0) & (np.abs(area) > 1e-300))
    order = live[np.argsort((bw * bh)[live], kind="stable")]

    start = 0
    while start < len(order):
        n = min(4096, len(order) - start)
        while n > 1 and n * (bw * bh)[order[start + n - 1]] > CANDIDATE_BUDGET:
            n //= 2
        sel = order[start:start + n]
        start += n

        Bw, Bh = int(bw[sel].max()), int(bh[sel].max())
        oy, ox = np.divmod(np.arange(Bw * Bh), Bw)
        px = xmin[sel, None] + ox[None, :]
        py = ymin[sel, None] + oy[None, :]
        pts = np.stack([px, py], axis=-1).astype(np.float64)

        tp = p[sel]
        a = area[sel, None]
        b0 = _cross2(tp[:, None, 1] - pts, tp[:, None, 2] - pts) / a
        b1 = _cross2(tp[:, None, 2] - pts, tp[:, None, 0] - pts) / a
        b2 = _cross2(tp[:, None, 0] - pts, tp[:, None, 1] - pts) / a
        inside = ((ox[None, :] < bw[sel, None]) & (oy[None, :] < bh[sel, None])
                  & (b0 >= -INSIDE_TOL) & (b1 >= -INSIDE_TOL) & (b2 >= -INSIDE_TOL))
        if not inside.any():
            continue

        tri = triangles[sel]
        iz = 1.0 / cam[tri, 2]
        w0, w1, w2 = b0 * iz[:, None, 0], b1 * iz[:, None, 1], b2 * iz[:, None, 2]
        inv_z = w0 + w1 + w2
        tri_i, cand = np.nonzero(inside)
        z = 1.0 / inv_z[tri_i, cand]
        attr = (w0[tri_i, cand, None] * attrs[tri[tri_i, 0]]
                + w1[tri_i, cand, None] * attrs[tri[tri_i, 1]]
                + w2[tri_i, cand, None] * attrs[tri[tri_i, 2]]) * z[:, None]
        pix = py[tri_i, cand] * W + px[tri_i, cand]

        # nearest candidate per pixel, then depth test against the buffer
        first = np.lexsort((z, pix))
        keep = np.r_[True, pix[first][1:] != pix[first][:-1]]
        first = first[keep]
        closer = z[first] < zbuf[pix[first]]
        hit = first[closer]
        zbuf[pix[hit]] = z[hit]
        abuf[pix[hit]] = attr[hit]

    return zbuf.reshape(H, W), abuf.reshape(H, W, -1)


def _shade(scene: SynthScene, depth: np.ndarray, q: np.ndarray) -> np.ndarray:
    covered = np.isfinite(depth)
    image = np.zeros(depth.shape + (scene.texture.shape[2],))
    image[covered] = texture_at(scene, q[covered])
    return image


def render_frame(scene: SynthScene, pose: Pose, K: Optional[Intrinsics] = None,
                 supersample: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Linear RGB image and z-depth of the mesh seen from `pose`; uncovered depth is inf."""
    if supersample < 1:
        raise ValueError(f"supersample must be ≥ 1, got {supersample}")
    K = scene.intrinsics if K is None else K
    Ks = K.scaled(supersample) if supersample > 1 else K
    cam = transform(pose, scene.vertices)
    if np.any(cam[:, 2] <= 1e-6):
        raise MeshBehindCameraError("mesh crosses the camera plane")

    depth, q = _rasterize(cam, scene.triangles, Ks, scene.tex_coords)
    image = _shade(scene, depth, q)
    if supersample > 1:
        s = supersample
        image = image.reshape(K.height, s, K.width, s, -1).mean(axis=(1, 3))
        depth = depth.reshape(K.height, s, K.width, s).mean(axis=(1, 3))
    return image, depth


def raycast_oracle(scene: SynthScene, pose: Pose, K: Optional[Intrinsics] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Brute-force Möller–Trumbore intersection of every pixel ray with every triangle."""
    K = scene.intrinsics if K is None else K
    cam = transform(pose, scene.vertices)
    d = ray_direction(K, pixel_grid(K.width, K.height))
    v0, v1, v2 = (cam[scene.triangles[:, i]] for i in range(3))
    e1, e2 = v1 - v0, v2 - v0

    pvec = np.cross(d[:, None, :], e2[None, :, :])
    det = np.sum(e1[None] * pvec, axis=-1)
    ok = np.abs(det) > 1e-14
    inv = 1.0 / np.where(ok, det, 1.0)
    tvec = -v0[None]
    u = np.sum(tvec * pvec, axis=-1) * inv
    qvec = np.cross(tvec, e1[None])
    v = np.sum(d[:, None, :] * qvec, axis=-1) * inv
    t = np.sum(e2[None] * qvec, axis=-1) * inv
    hit = ok & (u >= -INSIDE_TOL) & (v >= -INSIDE_TOL) & (u + v <= 1 + INSIDE_TOL) & (t > 0)

    t_hit = np.where(hit, t, np.inf)
    best = np.argmin(t_hit, axis=1)
    rows = np.arange(len(d))
    depth = t_hit[rows, best]
    tri = scene.triangles[best]
    bu, bv = u[rows, best], v[rows, best]
    q = ((1 - bu - bv)[:, None] * scene.tex_coords[tri[:, 0]]
         + bu[:, None] * scene.tex_coords[tri[:, 1]]
         + bv[:, None] * scene.tex_coords[tri[:, 2]])
    depth = depth.reshape(K.height, K.width)
    return _shade(scene, depth, q.reshape(K.height, K.width, 2)), depth


# ---------------------------------------------------------------------------
# bursts
# ---------------------------------------------------------------------------

def make_burst(scene_spec: SceneSpec, tremor_spec: TremorSpec, sensor_cfg: SensorConfig,
               K: Optional[Intrinsics] = None, supersample: int = 2, threads: Optional[int] = None,
               progress: bool = False) -> Tuple[BurstStack, GroundTruth]:
    scene = make_scene(scene_spec, K)
    K = scene.intrinsics
    traj = sample_tremor(tremor_spec)
    sensor = make_sensor(sensor_cfg)
    taus = np.linspace(0.0, 1.0, tremor_spec.frames)

    def render(n: int) -> np.ndarray:
        image, _ = render_frame(scene, pose_at(traj, float(taus[n])), K, supersample)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([sensor_cfg.seed, n])))
        return sensor.simulate(image, rng)

    with ThreadPoolExecutor(max_workers=threads or os.cpu_count() or 1) as pool:
        frames = list(tqdm(pool.map(render, range(tremor_spec.frames)), total=tremor_spec.frames,
                           desc="render", disable=not progress))

    burst = BurstStack(np.stack(frames), taus * tremor_spec.duration, sensor.frame_intrinsics(K), sensor.mode)
    gt = GroundTruth(scene.depth, traj, scene.plane, scene.mask, K)
    return burst, gt


def gt_parallax(gt: GroundTruth, taus) -> float:
    return max_parallax(gt.intrinsics, gt.depth.depths, gt.trajectory, taus)


def burst_consistency_residual(burst: BurstStack, gt: GroundTruth, border: int = 4) -> float:
    """Mean |frame_n(reproject(p)) − frame_0(p)| using ground-truth depth and poses."""
    Kb, Kf = burst.intrinsics, gt.intrinsics
    pixels = pixel_grid(Kb.width, Kb.height)
    inner = ((pixels[:, 0] >= border) & (pixels[:, 0] <= Kb.width - 1 - border)
             & (pixels[:, 1] >= border) & (pixels[:, 1] <= Kb.height - 1 - border))
    pixels = pixels[inner]

    full = np.stack([(pixels[:, 0] + 0.5) * Kf.width / Kb.width - 0.5,
                     (pixels[:, 1] + 0.5) * Kf.height / Kb.height - 0.5], axis=1)
    depth_img = np.where(gt.depth.valid, gt.depth.depths, 0.0)[..., None]
    depth, _ = dm.bilinear_sample(depth_img, full)
    depth = depth.data[:, 0]
    usable = depth > 0

    cols, rows = pixels[:, 0].astype(np.intp), pixels[:, 1].astype(np.intp)
    ref = burst.frames[0][rows, cols]
    residuals = []
    for n, tau in enumerate(burst.taus[1:], start=1):
        uv, valid = reproject(pixels[usable], depth[usable], pose_at(gt.trajectory, float(tau)), Kb)
        obs, in_bounds = dm.bilinear_sample(burst.frames[n], uv)
        ok = valid & in_bounds
        residuals.append(np.abs(obs.data[ok] - ref[usable][ok]).ravel())
    return float(np.mean(np.concatenate(residuals)))


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="render a synthetic burst and report its self-consistency")
    parser.add_argument("--mode", choices=list(SENSORS.keys()), default="raw12")
    parser.add_argument("--frames", type=int, default=16)
    parser.add_argument("--seed", "-s", type=int, default=0)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO)
    burst, gt = make_burst(SceneSpec(seed=args.seed), TremorSpec(frames=args.frames, seed=args.seed),
                           SensorConfig(mode=args.mode, seed=args.seed), progress=True)
    print(f"frames: {burst.num_frames}, {burst.width}x{burst.height}x{burst.channels}")
    print(f"max parallax: {gt_parallax(gt, burst.taus):.2f} px")
    print(f"consistency residual: {burst_consistency_residual(burst, gt):.2e}")
