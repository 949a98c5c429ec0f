import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Union

import numpy as np

import diffMath as dm

"""
@Data: 2025/5/12
@Desc: 针孔相机几何与 Bézier 位姿轨迹
"""

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, dm.DTensor]

# 2nd-order Taylor branch below this θ²
SMALL_ANGLE_SQ = 1e-6

# r @ SKEW_GEN -> row-major [r]_x
SKEW_GEN = np.zeros((3, 9))
SKEW_GEN[2, 1], SKEW_GEN[1, 2] = -1.0, 1.0
SKEW_GEN[2, 3], SKEW_GEN[0, 5] = 1.0, -1.0
SKEW_GEN[1, 6], SKEW_GEN[0, 7] = -1.0, 1.0


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"sensor extent must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} sensor")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, s: float) -> "Intrinsics":
        """Resample the sensor by `s`, keeping pixel centers aligned."""
        return Intrinsics(
            fx=self.fx * s,
            fy=self.fy * s,
            cx=(self.cx + 0.5) * s - 0.5,
            cy=(self.cy + 0.5) * s - 0.5,
            width=int(round(self.width * s)),
            height=int(round(self.height * s)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Intrinsics":
        try:
            return cls(float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]),
                       int(data["width"]), int(data["height"]))
        except KeyError as e:
            raise ValueError(f"intrinsics missing field {e}") from e


def default_intrinsics(width: int, height: int, focal_scale: float = 1.2) -> Intrinsics:
    f = focal_scale * max(width, height)
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass
class Pose:
    rotation: ArrayLike
    translation: ArrayLike

    def __post_init__(self):
        if not isinstance(self.rotation, dm.DTensor):
            self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if not isinstance(self.translation, dm.DTensor):
            self.translation = np.asarray(self.translation, dtype=np.float64)
        if np.linalg.norm(dm.value_of(self.rotation)) >= math.pi:
            raise ValueError("rotation angle must stay below π")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.zeros(3))

    def matrix(self) -> ArrayLike:
        return rodrigues(self.rotation)


@dataclass
class PoseTrajectory:
    rot_ctrl: ArrayLike
    trans_ctrl: ArrayLike

    def __post_init__(self):
        if not isinstance(self.rot_ctrl, dm.DTensor):
            self.rot_ctrl = np.asarray(self.rot_ctrl, dtype=np.float64)
        if not isinstance(self.trans_ctrl, dm.DTensor):
            self.trans_ctrl = np.asarray(self.trans_ctrl, dtype=np.float64)
        r_shape = tuple(dm.value_of(self.rot_ctrl).shape)
        t_shape = tuple(dm.value_of(self.trans_ctrl).shape)
        if len(r_shape) != 2 or r_shape[1] != 3 or r_shape != t_shape or r_shape[0] < 1:
            raise ValueError(f"control polygons must both be (P+1)×3, got {r_shape} and {t_shape}")

    @property
    def degree(self) -> int:
        return dm.value_of(self.rot_ctrl).shape[0] - 1

    @classmethod
    def zeros(cls, degree: int = 2) -> "PoseTrajectory":
        return cls(np.zeros((degree + 1, 3)), np.zeros((degree + 1, 3)))

    def pose_at(self, tau: float) -> Pose:
        return pose_at(self, tau)

    def detached(self) -> "PoseTrajectory":
        return PoseTrajectory(dm.value_of(self.rot_ctrl).copy(), dm.value_of(self.trans_ctrl).copy())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "degree": self.degree,
            "rot_ctrl": dm.value_of(self.rot_ctrl).tolist(),
            "trans_ctrl": dm.value_of(self.trans_ctrl).tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PoseTrajectory":
        traj = cls(data["rot_ctrl"], data["trans_ctrl"])
        if "degree" in data and int(data["degree"]) != traj.degree:
            raise ValueError(f"degree {data['degree']} disagrees with {traj.degree + 1} control points")
        return traj


def ray_direction(K: Intrinsics, pixel) -> np.ndarray:
    """z-normalized ray through pixel (u, v); pixels outside the sensor are fine."""
    p = np.asarray(pixel, dtype=np.float64)
    return np.stack([(p[..., 0] - K.cx) / K.fx, (p[..., 1] - K.cy) / K.fy, np.ones(p.shape[:-1])], axis=-1)


def project(K: Intrinsics, point: ArrayLike, z_min: float = 1e-6):
    """Pinhole projection; returns (uv, in_front) with Z clamped at z_min."""
    X = dm.take(point, 0, axis=-1)
    Y = dm.take(point, 1, axis=-1)
    Z = dm.take(point, 2, axis=-1)
    in_front = Z.data > z_min
    Zc = dm.clamp(Z, lo=z_min)
    u = X / Zc * K.fx + K.cx
    v = Y / Zc * K.fy + K.cy
    return dm.lower(dm.stack([u, v], axis=-1), point), in_front


def rodrigues(axis_angle: ArrayLike) -> ArrayLike:
    r = axis_angle if isinstance(axis_angle, dm.DTensor) else dm.lift(axis_angle)
    theta_sq = dm.sum(r * r)
    if float(theta_sq.data) < SMALL_ANGLE_SQ:
        a = 1.0 - theta_sq / 6.0
        b = 0.5 - theta_sq / 24.0
    else:
        theta = dm.sqrt(theta_sq)
        a = dm.sin(theta) / theta
        b = (1.0 - dm.cos(theta)) / theta_sq
    k = dm.reshape(dm.matmul(r, SKEW_GEN), (3, 3))
    R = np.eye(3) + a * k + b * dm.matmul(k, k)
    return dm.lower(R, axis_angle)


def transform(pose: Pose, point: ArrayLike) -> ArrayLike:
    R = rodrigues(pose.rotation)
    out = dm.matmul(point, dm.transpose(R)) + pose.translation
    return dm.lower(out, point, pose.rotation, pose.translation)


def inverse_transform(pose: Pose, point: ArrayLike) -> ArrayLike:
    R = rodrigues(pose.rotation)
    out = dm.matmul(dm.sub(point, pose.translation), R)
    return dm.lower(out, point, pose.rotation, pose.translation)


def bernstein_basis(degree: int, tau: float) -> np.ndarray:
    return np.array([math.comb(degree, k) * tau ** k * (1.0 - tau) ** (degree - k) for k in range(degree + 1)])


def _de_casteljau(ctrl: ArrayLike, tau: float) -> ArrayLike:
    n = dm.value_of(ctrl).shape[0]
    if isinstance(ctrl, dm.DTensor):
        pts = [dm.take(ctrl, i, axis=0) for i in range(n)]
    else:
        pts = [ctrl[i] for i in range(n)]
    while len(pts) > 1:
        pts = [(1.0 - tau) * a + tau * b for a, b in zip(pts[:-1], pts[1:])]
    return pts[0]


def pose_at(traj: PoseTrajectory, tau: float) -> Pose:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"τ must lie in [0, 1], got {tau}")
    return Pose(_de_casteljau(traj.rot_ctrl, tau), _de_casteljau(traj.trans_ctrl, tau))
