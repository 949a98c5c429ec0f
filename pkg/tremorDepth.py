import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import cv2
import numpy as np

from artifactHasher import ArtifactHasher
from burstContainer import ContainerError, read_container, read_ground_truth, read_json, read_meta, write_container, write_json
from burstSynth import DegenerateSceneError, MeshBehindCameraError, gt_parallax, make_burst
from burstTrainer import NoParallaxError, fit
from cameraModel import Intrinsics, PoseTrajectory
from depthEval import (AlignmentUndefinedError, DepthShapeError, EmptyOverlapError, MeshError, PfmError,
                       depth_metrics, depth_to_mesh, export_obj, export_pfm, plane_segmentation, pose_error, read_pfm)
from runConfig import ConfigError, apply_overrides, load_config, resolve_threads, write_resolved
from sceneModel import CheckpointError, render_maps, save_checkpoint
from SensorModel.Rgb8Sensor import Rgb8Sensor
from SensorModel.SensorSimulator import SensorConfig

"""
@Data: 2025/5/27
@Desc: 命令行入口：simulate / fit / eval / mesh，退出码 0 成功，2 输入或配置错误，3 视差不足
"""

logger = logging.getLogger("tremorDepth")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NO_PARALLAX = 3

INPUT_ERRORS = (
    ConfigError, ContainerError, PfmError, DepthShapeError, MeshError, EmptyOverlapError,
    AlignmentUndefinedError, CheckpointError, DegenerateSceneError, MeshBehindCameraError,
)

CHECKPOINT_FILE = "scene.tdpt"
TRAJECTORY_FILE = "trajectory.json"
DEPTH_FILE = "depth.pfm"
IMAGE_FILE = "image.png"
MASK_FILE = "mask.png"
FIT_LOG_FILE = "fit_log.jsonl"
METRICS_FILE = "metrics.json"


def full_resolution(K: Intrinsics, mode: str) -> Intrinsics:
    return K.scaled(2.0) if mode == "raw12" else K


def display_image(image: np.ndarray, mode: str) -> np.ndarray:
    """Model image as an 8-bit BGR array for cv2.imwrite."""
    image = np.clip(image, 0.0, 1.0)
    if mode == "raw12":
        rgb = np.stack([image[..., 0], 0.5 * (image[..., 1] + image[..., 2]), image[..., 3]], axis=-1)
        rgb = Rgb8Sensor(SensorConfig(mode="rgb8")).delinearize(rgb)
    else:
        rgb = image
    return cv2.cvtColor(np.round(rgb * 255.0).astype(np.uint8), cv2.COLOR_RGB2BGR)


def cmd_simulate(args) -> int:
    cfg = apply_overrides(load_config(args.config), seed=args.seed, mode=args.mode, out_dir=args.out)
    out_dir = cfg.out.dir
    burst, gt = make_burst(cfg.scene, cfg.tremor, cfg.sensor, threads=resolve_threads(args.threads),
                           progress=not args.quiet)
    write_container(out_dir, burst, gt)
    write_resolved(cfg, out_dir)
    ArtifactHasher(out_dir).write_manifest()

    parallax = gt_parallax(gt, burst.taus)
    if parallax < cfg.fit.min_parallax_px:
        logger.warning("max parallax %.2f px — fit will fail", parallax)
    print(f"frames: {burst.num_frames}  resolution: {gt.intrinsics.width}x{gt.intrinsics.height}  "
          f"mode: {burst.mode}  max parallax: {parallax:.2f} px")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = apply_overrides(load_config(args.config), seed=args.seed, iterations=args.iterations,
                          fix_image_frame0=True if args.fix_image_frame0 else None, out_dir=args.out)
    out_dir = cfg.out.dir
    burst = read_container(args.burst)
    logger.info("fitting %d %s frames (%dx%d) for %d iterations", burst.num_frames, burst.mode,
                burst.width, burst.height, cfg.fit.iterations)

    scene, traj, log = fit(burst, cfg.fit, progress=not args.quiet)

    os.makedirs(out_dir, exist_ok=True)
    K = burst.intrinsics
    K_full = full_resolution(K, burst.mode)
    resolution = (K_full.width, K_full.height)
    depth, image = render_maps(scene, K, resolution)

    save_checkpoint(scene, os.path.join(out_dir, CHECKPOINT_FILE))
    write_json(traj.to_dict(), os.path.join(out_dir, TRAJECTORY_FILE))
    export_pfm(depth, os.path.join(out_dir, DEPTH_FILE))
    cv2.imwrite(os.path.join(out_dir, IMAGE_FILE), display_image(image, burst.mode))
    if cfg.eval.segmentation_threshold_fraction > 0:
        plane_z = scene.plane.offset / scene.plane.unit_normal[2]
        mask = plane_segmentation(scene, K, resolution, cfg.eval.segmentation_threshold_fraction * plane_z)
        cv2.imwrite(os.path.join(out_dir, MASK_FILE), np.where(mask, 255, 0).astype(np.uint8))
    log.to_jsonl(os.path.join(out_dir, FIT_LOG_FILE))
    write_resolved(cfg, out_dir)
    ArtifactHasher(out_dir).write_manifest()

    print(f"wrote {os.path.join(out_dir, DEPTH_FILE)}  ({resolution[0]}x{resolution[1]}, "
          f"{len(log.records)} log records, {len(log.events)} events)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = apply_overrides(load_config(args.config), align=False if args.no_align else None,
                          pose=True if args.pose else None, object_mask=False if args.full_frame else None)
    pred = read_pfm(args.pred)
    gt = read_ground_truth(args.gt)
    if gt is None:
        raise ContainerError(f"{args.gt}: container carries no ground truth")

    mask = gt.mask if cfg.eval.use_object_mask and gt.mask.any() else None
    report = depth_metrics(pred, gt.depth, mask, align=cfg.eval.align)

    if cfg.eval.pose:
        traj_path = args.trajectory or os.path.join(os.path.dirname(os.path.abspath(args.pred)), TRAJECTORY_FILE)
        if os.path.exists(traj_path):
            try:
                pred_traj = PoseTrajectory.from_dict(read_json(traj_path))
            except ValueError as e:
                raise ContainerError(f"{traj_path}: {e}") from e
            report.pose = pose_error(pred_traj, gt.trajectory, cfg.eval.pose_samples)
        else:
            logger.warning("no predicted trajectory at %s; skipping pose errors", traj_path)

    out_path = args.metrics_out or os.path.join(os.path.dirname(os.path.abspath(args.pred)), METRICS_FILE)
    write_json(report.to_dict(), out_path)
    print(report.format_pair(paper_style=args.paper_style))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def mesh_intrinsics(meta: dict, width: int, height: int) -> Intrinsics:
    """Pick the camera of meta.json that matches a (width, height) depth map."""
    candidates = []
    if meta.get("ground_truth"):
        candidates.append(Intrinsics.from_dict(meta["ground_truth"]["intrinsics"]))
    candidates.append(Intrinsics.from_dict(meta["intrinsics"]))
    for K in candidates:
        if (K.width, K.height) == (width, height):
            return K
    K = candidates[-1]
    if abs(width / K.width - height / K.height) > 1e-9:
        raise DepthShapeError(f"depth {width}x{height} is not a rescale of the {K.width}x{K.height} sensor")
    return K.scaled(width / K.width)


def cmd_mesh(args) -> int:
    cfg = apply_overrides(load_config(args.config), cull_ratio=args.cull_ratio)
    depth = read_pfm(args.depth)
    meta = read_meta(os.path.dirname(os.path.abspath(args.meta)))
    try:
        K = mesh_intrinsics(meta, depth.width, depth.height)
    except (KeyError, TypeError) as e:
        raise ContainerError(f"{args.meta}: malformed intrinsics ({e})") from e
    mesh = depth_to_mesh(depth, K, cfg.eval.cull_ratio)
    export_obj(mesh, args.out)
    print(f"wrote {args.out}  ({len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tremorDepth", description="手抖长连拍的仿射深度估计")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", "-c", default=None, help="JSON 运行配置")
        p.add_argument("--quiet", "-q", action="store_true", help="关闭进度条")

    p = sub.add_parser("simulate", help="渲染合成连拍并写入容器")
    common(p)
    p.add_argument("--out", "-o", default=None, help="容器输出目录")
    p.add_argument("--seed", "-s", type=int, default=None)
    p.add_argument("--mode", choices=["raw12", "rgb8"], default=None)
    p.add_argument("--threads", type=int, default=None, help="渲染线程数，缺省读取 TREMOR_DEPTH_THREADS")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="联合优化深度、图像与位姿")
    common(p)
    p.add_argument("--burst", "-b", required=True, help="连拍容器目录")
    p.add_argument("--out", "-o", default=None, help="拟合输出目录")
    p.add_argument("--seed", "-s", type=int, default=None)
    p.add_argument("--iterations", "-n", type=int, default=None)
    p.add_argument("--fix-image-frame0", action="store_true", help="图像模型固定为第 0 帧")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="对比预测深度与真值")
    common(p)
    p.add_argument("--pred", required=True, help="预测深度 PFM")
    p.add_argument("--gt", required=True, help="带 gt/ 的连拍容器目录")
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--pose", action="store_true", help="同时评估位姿误差")
    p.add_argument("--full-frame", action="store_true", help="忽略真值物体掩码，在整帧上评估")
    p.add_argument("--trajectory", default=None, help="预测轨迹 JSON，缺省为 pred 同目录下的 trajectory.json")
    p.add_argument("--metrics-out", default=None)
    p.add_argument("--paper-style", action="store_true", help="输出 .177/.217 形式")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mesh", help="深度图转 OBJ 网格")
    common(p)
    p.add_argument("--depth", required=True)
    p.add_argument("--meta", required=True, help="容器的 meta.json")
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--cull-ratio", type=float, default=None)
    p.set_defaults(func=cmd_mesh)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NoParallaxError as e:
        logger.error("insufficient parallax: %s", e)
        return EXIT_NO_PARALLAX
    except INPUT_ERRORS as e:
        logger.error("%s", e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
