import json
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import cv2
import numpy as np
from tqdm import trange

import diffMath as dm
from cameraModel import Intrinsics, Pose, PoseTrajectory, pose_at, project, ray_direction, transform
from sceneModel import DegenerateRayError, ModelConfig, SceneModel, color_at, depth_at, init_scene, pixel_grid

"""
@Data: 2025/5/22
@Desc: 联合优化：光度重投影损失 + Adam，更新图像/深度 MLP、平面与相机轨迹
"""

logger = logging.getLogger(__name__)

MODE_CHANNELS = {"raw12": 4, "rgb8": 3}
LOSS_KINDS = ("l1", "l2")
# SeedSequence stream tags
BATCH_STREAM = 2


class NoParallaxError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class BurstStack:
    frames: np.ndarray
    timestamps: np.ndarray
    intrinsics: Intrinsics
    mode: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.mode not in MODE_CHANNELS:
            raise ValueError(f"unknown sensor mode {self.mode!r}")
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be N×H×W×C, got shape {self.frames.shape}")
        N, H, W, C = self.frames.shape
        if N < 2:
            raise ValueError(f"a burst needs at least 2 frames, got {N}")
        if C != MODE_CHANNELS[self.mode]:
            raise ValueError(f"{self.mode} bursts carry {MODE_CHANNELS[self.mode]} channels, got {C}")
        if (W, H) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError(f"frames are {W}x{H} but intrinsics describe "
                             f"{self.intrinsics.width}x{self.intrinsics.height}")
        if not np.all(np.isfinite(self.frames)) or self.frames.min() < 0 or self.frames.max() > 1:
            raise ValueError("frame values must be finite and lie in [0, 1]")
        if self.timestamps.shape != (N,) or np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("need one strictly increasing timestamp per frame")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def channels(self) -> int:
        return self.frames.shape[3]

    @property
    def taus(self) -> np.ndarray:
        t = self.timestamps
        return (t - t[0]) / (t[-1] - t[0])


@dataclass
class FitConfig:
    iterations: int = 20000
    batch_size: int = 1024
    lr_mlp: float = 3e-4
    lr_pose: float = 1e-4
    lr_plane: float = 1e-3
    alpha_ramp_fraction: float = 0.7
    loss_kind: str = "l1"
    seed: int = 0
    fix_image_to_frame0: bool = False
    pose_degree: int = 2
    num_bands: int = 8
    include_raw: bool = True
    image_layers: int = 4
    image_width: int = 128
    depth_layers: int = 4
    depth_width: int = 64
    freeze_alpha: bool = False
    depth_ramp_fraction: Optional[float] = None
    log_every: int = 100
    min_valid_fraction: float = 0.05
    degenerate_patience: int = 100
    min_parallax_px: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be ≥ 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be ≥ 1")
        if min(self.lr_mlp, self.lr_pose, self.lr_plane) <= 0:
            raise ValueError("learning rates must be positive")
        for name in ("alpha_ramp_fraction", "depth_ramp_fraction"):
            value = getattr(self, name)
            if value is not None and not 0 < value <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {list(LOSS_KINDS)}, got {self.loss_kind!r}")
        if self.pose_degree < 1:
            raise ValueError("pose_degree must be ≥ 1")
        if self.log_every < 1 or self.degenerate_patience < 1:
            raise ValueError("log_every and degenerate_patience must be ≥ 1")

    def model_config(self, K: Intrinsics, channels: int) -> ModelConfig:
        return ModelConfig(
            intrinsics=K,
            channels=channels,
            num_bands=self.num_bands,
            include_raw=self.include_raw,
            image_layers=self.image_layers,
            image_width=self.image_width,
            depth_layers=self.depth_layers,
            depth_width=self.depth_width,
        )


@dataclass
class AdamState:
    lr: Dict[str, float]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Mapping[str, np.ndarray], lr: Mapping[str, float], beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            lr=dict(lr),
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


@dataclass
class FitLog:
    records: List[Dict[str, Any]] = field(default_factory=list)
    events: List[Dict[str, Any]] = field(default_factory=list)

    def record(self, iteration: int, loss: float, alpha: float, valid_fraction: float,
               rot_norm: float, trans_norm: float) -> None:
        if self.records and iteration <= self.records[-1]["iteration"]:
            raise ValueError("FitLog iterations must increase")
        if not np.isfinite(loss):
            raise ValueError("FitLog loss must be finite")
        self.records.append({
            "iteration": iteration,
            "loss": loss,
            "alpha": alpha,
            "valid_fraction": valid_fraction,
            "rot_norm": rot_norm,
            "trans_norm": trans_norm,
        })

    def event(self, iteration: int, kind: str, message: str) -> None:
        self.events.append({"iteration": iteration, "kind": kind, "message": message})

    @property
    def losses(self) -> List[float]:
        return [r["loss"] for r in self.records]

    def to_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.records:
                f.write(json.dumps({"type": "record", **rec}) + "\n")
            for ev in self.events:
                f.write(json.dumps({"type": "event", **ev}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str) -> "FitLog":
        log = cls()
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                item = json.loads(line)
                kind = item.pop("type")
                (log.records if kind == "record" else log.events).append(item)
        return log


# ---------------------------------------------------------------------------
# geometry / schedule
# ---------------------------------------------------------------------------

def reproject(pixel, depth, pose: Pose, K: Intrinsics):
    """Move reference pixels at `depth` into the view of `pose`; returns (uv, valid)."""
    pts = np.asarray(pixel, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d = depth if isinstance(depth, dm.DTensor) else np.atleast_1d(np.asarray(depth, dtype=np.float64))
    points = dm.mul(dm.reshape(d, (-1, 1)), ray_direction(K, pts))
    uv, in_front = project(K, transform(pose, points))
    uvv = dm.value_of(uv)
    valid = in_front & (uvv[:, 0] >= 0) & (uvv[:, 0] <= K.width - 1) & (uvv[:, 1] >= 0) & (uvv[:, 1] <= K.height - 1)

    taped = any(isinstance(x, dm.DTensor) for x in (depth, pose.rotation, pose.translation))
    if not taped:
        uv = dm.value_of(uv)
        if single:
            return uv[0], bool(valid[0])
    return uv, valid


def alpha_schedule(iteration: int, cfg: FitConfig, ramp_fraction: Optional[float] = None) -> float:
    """Linear 0 → L ramp over the first ramp_fraction of the iterations, then L."""
    if iteration < 0 or iteration > max(cfg.iterations, 0):
        raise ValueError(f"iteration {iteration} outside [0, {cfg.iterations}]")
    L = float(cfg.num_bands)
    if cfg.freeze_alpha:
        return L
    ramp = cfg.alpha_ramp_fraction if ramp_fraction is None else ramp_fraction
    ramp_end = ramp * cfg.iterations
    if ramp_end <= 0:
        return L
    return min(L, L * iteration / ramp_end)


def max_parallax(K: Intrinsics, depth: np.ndarray, traj: PoseTrajectory, taus: Sequence[float],
                 stride: int = 4) -> float:
    """Largest depth-dependent pixel displacement over frames (rotation-only motion removed)."""
    depth = np.asarray(depth, dtype=np.float64)
    vs, us = np.mgrid[0:depth.shape[0]:stride, 0:depth.shape[1]:stride]
    d = depth[vs, us].ravel()
    pixels = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
    ok = np.isfinite(d) & (d > 0)
    pixels, d = pixels[ok], d[ok]
    if not len(d):
        return 0.0

    worst = 0.0
    for tau in taus:
        pose = pose_at(traj, float(tau))
        full, _ = reproject(pixels, d, pose, K)
        rot_only, _ = reproject(pixels, d, Pose(pose.rotation, np.zeros(3)), K)
        worst = max(worst, float(np.max(np.linalg.norm(full - rot_only, axis=1))))
    return worst


def estimate_burst_motion(burst: BurstStack) -> np.ndarray:
    """Global shift (dx, dy) of each frame against frame 0 by phase correlation."""
    ref = burst.frames[0].mean(axis=2)
    win = cv2.createHanningWindow((burst.width, burst.height), cv2.CV_64F)
    shifts = [(0.0, 0.0)]
    for n in range(1, burst.num_frames):
        (dx, dy), _ = cv2.phaseCorrelate(ref, burst.frames[n].mean(axis=2), win)
        shifts.append((float(dx), float(dy)))
    return np.array(shifts)


# ---------------------------------------------------------------------------
# loss / optimizer
# ---------------------------------------------------------------------------

def trajectory_from(params: Mapping[str, Any], degree: int) -> PoseTrajectory:
    """Control polygons with the reference (frame-0) row pinned to zero."""
    zero = np.zeros((1, 3))
    rot = params.get("traj.rot_free", np.zeros((degree, 3)))
    trans = params.get("traj.trans_free", np.zeros((degree, 3)))
    return PoseTrajectory(dm.concat([zero, rot], axis=0), dm.concat([zero, trans], axis=0))


def photometric_loss(scene: SceneModel, traj: PoseTrajectory, burst: BurstStack, batch: np.ndarray,
                     alpha: float, params: Optional[Mapping[str, Any]] = None,
                     depth_alpha: Optional[float] = None, loss_kind: str = "l1"):
    """Mean per-channel residual between the image model and every frame at reprojected pixels.

    Returns (loss, valid_fraction); valid_fraction counts the non-reference frames.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != 2 or len(batch) < 1:
        raise ValueError("batch must be M×2 with M ≥ 1")
    K = burst.intrinsics
    M, C = len(batch), burst.channels

    color = color_at(scene, batch, params, alpha)
    depth = depth_at(scene, K, batch, params, depth_alpha if depth_alpha is not None else alpha)

    total = None
    count = 0
    valid_other = 0
    for n, tau in enumerate(burst.taus):
        if n == 0:
            # identity pose: the sample point is the batch pixel itself
            obs, valid = dm.bilinear_sample(burst.frames[0], batch)
        else:
            uv, valid = reproject(batch, depth, pose_at(traj, float(tau)), K)
            obs, in_bounds = dm.bilinear_sample(burst.frames[n], uv)
            valid = valid & in_bounds
            valid_other += int(valid.sum())
        residual = dm.sub(color, obs)
        rho = dm.abs(residual) if loss_kind == "l1" else dm.square(residual)
        term = dm.sum(rho * valid[:, None].astype(np.float64))
        total = term if total is None else total + term
        count += int(valid.sum())

    valid_fraction = valid_other / float(M * (burst.num_frames - 1))
    if valid_other == 0:
        raise NoParallaxError("no batch sample reprojects inside any non-reference frame")
    loss = total / float(count * C)
    return (loss if isinstance(loss, dm.DTensor) and loss.tape is not None else float(dm.value_of(loss))), valid_fraction


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p - state.lr[name] * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _learning_rates(params: Mapping[str, np.ndarray], cfg: FitConfig) -> Dict[str, float]:
    rates = {}
    for name in params:
        if name.startswith("traj."):
            rates[name] = cfg.lr_pose
        elif name.startswith("plane."):
            rates[name] = cfg.lr_plane
        else:
            rates[name] = cfg.lr_mlp
    return rates


def _batch(cfg: FitConfig, iteration: int, width: int, height: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, BATCH_STREAM, iteration])))
    idx = rng.integers(0, width * height, size=cfg.batch_size)
    return np.stack([idx % width, idx // width], axis=1).astype(np.float64)


def fit(burst: BurstStack, cfg: FitConfig, progress: bool = True) -> Tuple[SceneModel, PoseTrajectory, FitLog]:
    K = burst.intrinsics
    scene = init_scene(cfg.model_config(K, burst.channels), cfg.seed)
    if cfg.fix_image_to_frame0:
        scene = replace(scene, reference_image=burst.frames[0].copy())
    traj = PoseTrajectory.zeros(cfg.pose_degree)
    log = FitLog()
    if cfg.iterations == 0:
        return scene, traj, log

    shifts = estimate_burst_motion(burst)
    if np.max(np.linalg.norm(shifts, axis=1)) < cfg.min_parallax_px:
        raise NoParallaxError(f"frames never move more than {cfg.min_parallax_px} px against frame 0")

    params = {name: value.copy() for name, value in scene.parameters().items()
              if not (cfg.fix_image_to_frame0 and name.startswith("image_mlp."))}
    params["traj.rot_free"] = np.zeros((cfg.pose_degree, 3))
    params["traj.trans_free"] = np.zeros((cfg.pose_degree, 3))
    state = AdamState.create(params, _learning_rates(params, cfg), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    names = list(params)

    streak = 0
    for it in trange(cfg.iterations, desc="fit", disable=not progress):
        alpha = alpha_schedule(it, cfg)
        depth_alpha = alpha if cfg.depth_ramp_fraction is None else alpha_schedule(it, cfg, cfg.depth_ramp_fraction)
        batch = _batch(cfg, it, burst.width, burst.height)

        tape = dm.Tape()
        tparams = {name: tape.input(params[name], name) for name in names}
        try:
            loss, valid_fraction = photometric_loss(scene, trajectory_from(tparams, cfg.pose_degree), burst, batch,
                                                    alpha, tparams, depth_alpha, cfg.loss_kind)
        except NoParallaxError:
            loss, valid_fraction = None, 0.0
        except (dm.NonFiniteError, DegenerateRayError) as e:
            log.event(it, "non_finite_forward", str(e))
            continue

        if valid_fraction < cfg.min_valid_fraction:
            streak += 1
            if streak >= cfg.degenerate_patience:
                raise NoParallaxError(f"valid fraction below {cfg.min_valid_fraction} for {streak} consecutive iterations")
        else:
            streak = 0
        if loss is None:
            continue

        tape.mark_output(loss)
        grads = dict(zip(names, dm.backward(tape)))
        try:
            params, state = adam_step(state, params, grads)
        except NonFiniteGradientError as e:
            log.event(it, "non_finite_gradient", str(e))
            continue
        params["plane.offset"] = np.maximum(params["plane.offset"], 1e-6)

        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            rot_norm = float(np.linalg.norm(params["traj.rot_free"]))
            trans_norm = float(np.linalg.norm(params["traj.trans_free"]))
            log.record(it, float(loss.data), alpha, valid_fraction, rot_norm, trans_norm)
            logger.info("iter %d loss %.6f alpha %.3f valid %.3f", it, float(loss.data), alpha, valid_fraction)

    final_alpha = alpha_schedule(cfg.iterations, cfg)
    scene_values = {k: v for k, v in params.items() if not k.startswith("traj.")}
    scene = scene.with_parameters(scene_values)
    scene = replace(scene, encoding=replace(scene.encoding, alpha=final_alpha),
                    depth_alpha=None if cfg.depth_ramp_fraction is None
                    else alpha_schedule(cfg.iterations, cfg, cfg.depth_ramp_fraction))
    traj = trajectory_from(params, cfg.pose_degree)
    traj = PoseTrajectory(dm.value_of(traj.rot_ctrl), dm.value_of(traj.trans_ctrl))

    coarse = pixel_grid(K.width, K.height)
    recovered = depth_at(scene, K, coarse).reshape(K.height, K.width)
    parallax = max_parallax(K, recovered, traj, burst.taus)
    logger.info("recovered translation-induced parallax %.3f px", parallax)
    if parallax < cfg.min_parallax_px:
        # enforced only for fits of at least degenerate_patience iterations
        if cfg.iterations < cfg.degenerate_patience:
            logger.warning("recovered trajectory explains only %.3f px of parallax after %d iterations",
                           parallax, cfg.iterations)
        else:
            raise NoParallaxError(f"recovered trajectory explains only {parallax:.3f} px of parallax")
    return scene, traj, log
