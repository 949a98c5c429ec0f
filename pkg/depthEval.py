import argparse
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from cameraModel import Intrinsics, PoseTrajectory, pose_at, ray_direction

"""
@Data: 2025/5/20
@Desc: 评估协议：仿射对齐后的相对误差/对数误差、位姿误差、平面分割、深度转网格与导出
"""

logger = logging.getLogger(__name__)

Z_MIN = 1e-6


class AlignmentUndefinedError(ValueError):
    pass


class EmptyOverlapError(ValueError):
    pass


class DepthShapeError(ValueError):
    pass


class PfmError(ValueError):
    pass


class MeshError(ValueError):
    pass


@dataclass
class DepthMap:
    depths: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.depths.ndim != 2:
            raise DepthShapeError(f"depth map must be H×W, got shape {self.depths.shape}")
        ok = np.isfinite(self.depths) & (self.depths > 0)
        self.valid = ok if self.valid is None else (np.asarray(self.valid, dtype=bool) & ok)

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    @property
    def width(self) -> int:
        return self.depths.shape[1]


@dataclass
class PoseErrorSummary:
    rotation_deg_mean: float
    rotation_deg_max: float
    translation_scale: float
    translation_rms: float
    direction_deg_mean: Optional[float]
    samples: int


@dataclass
class MetricsReport:
    abs_rel: float
    log_err: float
    sq_rel: float
    rmse: float
    delta1: float
    a: float
    b: float
    valid_count: int
    aligned: bool
    pose: Optional[PoseErrorSummary] = None

    def format_pair(self, paper_style: bool = False) -> str:
        text = f"{self.abs_rel:.3f}/{self.log_err:.3f}"
        if paper_style:
            text = "/".join(part[1:] if part.startswith("0.") else part for part in text.split("/"))
        return text

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")
        if self.colors is not None and len(self.colors) != len(self.vertices):
            raise MeshError("need one color per vertex")


# ---------------------------------------------------------------------------
# depth metrics
# ---------------------------------------------------------------------------

def _overlap(pred: DepthMap, gt: DepthMap, mask: Optional[np.ndarray]) -> np.ndarray:
    if pred.depths.shape != gt.depths.shape:
        raise DepthShapeError(f"prediction {pred.depths.shape} and ground truth {gt.depths.shape} differ in shape")
    m = pred.valid & gt.valid
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != m.shape:
            raise DepthShapeError(f"mask {mask.shape} does not match depth {m.shape}")
        m &= mask
    return m


def affine_align(pred: DepthMap, gt: DepthMap, mask: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """Least-squares (a, b) minimizing Σ(a·pred + b − gt)² over the overlap."""
    m = _overlap(pred, gt, mask)
    x = pred.depths[m]
    y = gt.depths[m]
    if x.size < 2 or np.ptp(x) == 0.0:
        raise AlignmentUndefinedError("need at least two distinct predicted depths to fit an affine map")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    a = float(np.dot(dx, y - ym) / np.dot(dx, dx))
    return a, float(ym - a * xm)


def depth_metrics(pred: DepthMap, gt: DepthMap, mask: Optional[np.ndarray] = None, align: bool = True,
                  z_min: float = Z_MIN) -> MetricsReport:
    m = _overlap(pred, gt, mask)
    if not m.any():
        raise EmptyOverlapError("prediction and ground truth share no valid pixel")
    a, b = affine_align(pred, gt, mask) if align else (1.0, 0.0)
    g = gt.depths[m]
    d = np.maximum(a * pred.depths[m] + b, z_min)

    thresh = np.maximum(g / d, d / g)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(d - g) / g)),
        log_err=float(np.mean(np.abs(np.log(d) - np.log(g)))),
        sq_rel=float(np.mean((d - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((d - g) ** 2))),
        delta1=float(np.mean(thresh < 1.25)),
        a=a,
        b=b,
        valid_count=int(m.sum()),
        aligned=align,
    )


def pose_error(pred: PoseTrajectory, gt: PoseTrajectory, samples: int = 16) -> PoseErrorSummary:
    taus = np.linspace(0.0, 1.0, samples)
    pred_poses = [pose_at(pred, float(t)) for t in taus]
    gt_poses = [pose_at(gt, float(t)) for t in taus]

    rot_p = Rotation.from_rotvec(np.stack([p.rotation for p in pred_poses]))
    rot_g = Rotation.from_rotvec(np.stack([p.rotation for p in gt_poses]))
    rot_err = np.degrees((rot_p * rot_g.inv()).magnitude())

    tp = np.stack([p.translation for p in pred_poses])
    tg = np.stack([p.translation for p in gt_poses])
    denom = float(np.sum(tp * tp))
    scale = float(np.sum(tp * tg)) / denom if denom > 0 else 0.0
    rms = float(np.sqrt(np.mean(np.sum((scale * tp - tg) ** 2, axis=1))))

    norm_p = np.linalg.norm(tp, axis=1)
    norm_g = np.linalg.norm(tg, axis=1)
    usable = (norm_g > 1e-12) & (norm_p > 1e-12)
    direction = None
    if usable.any():
        cos = np.sum(tp[usable] * tg[usable], axis=1) / (norm_p[usable] * norm_g[usable])
        direction = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).mean())
    elif not np.any(norm_g > 1e-12):
        logger.info("ground-truth translation is identically zero; direction error undefined")

    return PoseErrorSummary(
        rotation_deg_mean=float(rot_err.mean()),
        rotation_deg_max=float(rot_err.max()),
        translation_scale=scale,
        translation_rms=rms,
        direction_deg_mean=direction,
        samples=samples,
    )


def plane_segmentation(scene, K: Intrinsics, resolution: Tuple[int, int], threshold: float) -> np.ndarray:
    """Pixels where the learned offset moves depth off the plane by more than `threshold`."""
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    return scene.offset_map(K, resolution) > threshold


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------------------
# mesh
# ---------------------------------------------------------------------------

def _incident_medians(edges: np.ndarray, lengths: np.ndarray, n_vertices: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per edge, the median length of the other edges at each endpoint (NaN if none)."""
    n_edges = len(edges)
    ends = np.concatenate([edges[:, 0], edges[:, 1]])
    ids = np.concatenate([np.arange(n_edges), np.arange(n_edges)])
    order = np.argsort(ends, kind="stable")
    ends, ids = ends[order], ids[order]
    first = np.searchsorted(ends, ends, side="left")
    slot = np.arange(len(ends)) - first
    incident = np.full((n_vertices, slot.max() + 1), -1, dtype=np.int64)
    incident[ends, slot] = ids

    medians = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for end in (0, 1):
            rows = incident[edges[:, end]]
            vals = np.where(rows >= 0, lengths[np.maximum(rows, 0)], np.nan)
            vals[rows == np.arange(n_edges)[:, None]] = np.nan
            medians.append(np.nanmedian(vals, axis=1))
    return medians[0], medians[1]


def depth_to_mesh(depth: DepthMap, K: Intrinsics, cull_ratio: float = 10.0,
                  colors: Optional[np.ndarray] = None) -> Mesh:
    """Unproject every valid pixel and triangulate the pixel grid.

    Edge lengths are measured relative to their length at unit depth, so a
    constant-depth map has uniform edges. A triangle is dropped when one of its
    edges is longer than cull_ratio times the median of the other edges meeting
    it at an endpoint (the smaller of the two endpoint medians).
    """
    H, W = depth.depths.shape
    valid = depth.valid
    if H < 2 or W < 2 or valid.sum() < 4:
        raise MeshError("need at least a 2×2 block of valid depths")

    us, vs = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    rays = ray_direction(K, np.stack([us, vs], axis=-1))
    index = np.full((H, W), -1, dtype=np.int64)
    index[valid] = np.arange(valid.sum())
    vertices = rays[valid] * depth.depths[valid][:, None]

    # cell corners: (r, c), (r+1, c), (r+1, c+1), (r, c+1)
    i1, i2, i3, i4 = index[:-1, :-1], index[1:, :-1], index[1:, 1:], index[:-1, 1:]
    tris = np.concatenate([
        np.stack([i1, i2, i3], axis=-1).reshape(-1, 3),
        np.stack([i1, i3, i4], axis=-1).reshape(-1, 3),
    ])
    tris = tris[np.all(tris >= 0, axis=1)]
    if not len(tris):
        raise MeshError("no grid cell has three valid corners")

    tri_edges = np.sort(np.stack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]], axis=1), axis=2)
    edges, inverse = np.unique(tri_edges.reshape(-1, 2), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1, 3)
    unit_rays = rays[valid]
    lengths = (np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
               / np.linalg.norm(unit_rays[edges[:, 0]] - unit_rays[edges[:, 1]], axis=1))

    med_a, med_b = _incident_medians(edges, lengths, len(vertices))
    reference = np.fmin(med_a, med_b)
    with np.errstate(invalid="ignore"):
        long_edge = lengths > cull_ratio * reference
    keep = ~np.any(long_edge[inverse], axis=1)

    v0, v1, v2 = vertices[tris[:, 0]], vertices[tris[:, 1]], vertices[tris[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    keep &= area > 1e-15
    logger.info("depth_to_mesh: %d vertices, %d/%d triangles kept", len(vertices), int(keep.sum()), len(tris))

    vertex_colors = None
    if colors is not None:
        vertex_colors = np.asarray(colors, dtype=np.float64)[valid][:, :3]
    return Mesh(vertices, tris[keep], vertex_colors)


def export_obj(mesh: Mesh, path: str) -> None:
    """ASCII OBJ in reference-camera coordinates (x right, y down, z forward); faces are 1-based."""
    with open(path, "w") as obj_file:
        for i, (x, y, z) in enumerate(mesh.vertices):
            if mesh.colors is not None:
                r, g, b = mesh.colors[i]
                obj_file.write(f"v {x:.9g} {y:.9g} {z:.9g} {r:.6g} {g:.6g} {b:.6g}\n")
            else:
                obj_file.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.triangles:
            obj_file.write(f"f {a + 1} {b + 1} {c + 1}\n")


def export_pfm(depth: DepthMap, path: str) -> None:
    data = np.where(depth.valid, depth.depths, 0.0).astype("<f4")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{depth.width} {depth.height}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(data).tobytes())


def read_pfm(path: str) -> DepthMap:
    try:
        f = open(path, "rb")
    except OSError as e:
        raise PfmError(f"{path}: cannot open ({e.strerror})") from e
    with f:
        try:
            kind = f.readline().strip()
            dims = f.readline().split()
            scale = float(f.readline().strip())
            width, height = int(dims[0]), int(dims[1])
        except (ValueError, IndexError) as e:
            raise PfmError(f"{path}: malformed PFM header") from e
        if kind != b"Pf":
            raise PfmError(f"{path}: expected single-channel 'Pf', got {kind!r}")
        dtype = "<f4" if scale < 0 else ">f4"
        payload = f.read()
    if len(payload) != 4 * width * height:
        raise PfmError(f"{path}: payload has {len(payload)} bytes, expected {4 * width * height}")
    data = np.flipud(np.frombuffer(payload, dtype=dtype).reshape(height, width))
    return DepthMap(data.astype(np.float64))


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="compare two PFM depth maps")
    parser.add_argument("pred", help="predicted depth PFM")
    parser.add_argument("gt", help="ground-truth depth PFM")
    parser.add_argument("--no-align", action="store_true", help="skip affine alignment")
    args = parser.parse_args()

    report = depth_metrics(read_pfm(args.pred), read_pfm(args.gt), align=not args.no_align)
    print(report.format_pair())
    print(json.dumps(report.to_dict(), indent=2))
