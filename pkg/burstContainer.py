import argparse
import json
import logging
import os
from typing import Any, Dict, Optional, Tuple

import cv2
import numpy as np

from burstSynth import SENSORS, GroundTruth
from burstTrainer import MODE_CHANNELS, BurstStack
from cameraModel import Intrinsics, PoseTrajectory
from depthEval import PfmError, export_pfm, read_pfm
from sceneModel import PlaneParams
from SensorModel.Raw12Sensor import BAYER_PLANES

"""
@Data: 2025/5/24
@Desc: 连拍容器的读写：meta.json + 每帧 PNG，可选 gt/ 目录（深度 PFM、轨迹与平面 JSON、掩码 PNG）
"""

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_FILE = "meta.json"
GT_DIR = "gt"
GT_FILES = {
    "depth": "gt/depth.pfm",
    "trajectory": "gt/trajectory.json",
    "plane": "gt/plane.json",
    "mask": "gt/mask.png",
}
META_KEYS = {"format_version", "mode", "num_frames", "intrinsics", "timestamps", "ground_truth"}


class ContainerError(ValueError):
    pass


def write_json(data: Dict[str, Any], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ContainerError(f"{path}: missing") from e
    except json.JSONDecodeError as e:
        raise ContainerError(f"{path}: invalid JSON ({e})") from e


def frame_files(mode: str, index: int) -> list:
    if mode == "raw12":
        return [f"frame_{index:04d}_{name}.png" for name, _, _, _ in BAYER_PLANES]
    return [f"frame_{index:04d}.png"]


def _write_frame(out_dir: str, mode: str, index: int, frame: np.ndarray) -> None:
    sensor = SENSORS[mode]
    codes = np.round(frame * (2 ** sensor.bits - 1))
    names = frame_files(mode, index)
    if mode == "raw12":
        for c, name in enumerate(names):
            cv2.imwrite(os.path.join(out_dir, name), codes[..., c].astype(np.uint16))
    else:
        cv2.imwrite(os.path.join(out_dir, names[0]), cv2.cvtColor(codes.astype(np.uint8), cv2.COLOR_RGB2BGR))


def _read_frame(in_dir: str, mode: str, index: int) -> np.ndarray:
    levels = 2 ** SENSORS[mode].bits - 1
    planes = []
    for name in frame_files(mode, index):
        path = os.path.join(in_dir, name)
        if not os.path.exists(path):
            raise ContainerError(f"{path}: missing frame file")
        img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
        if img is None:
            raise ContainerError(f"{path}: unreadable PNG")
        if mode == "raw12":
            if img.dtype != np.uint16 or img.ndim != 2:
                raise ContainerError(f"{path}: raw12 planes must be 16-bit grayscale, got {img.dtype} {img.shape}")
            if img.max(initial=0) > levels:
                raise ContainerError(f"{path}: code above the 12-bit range")
            planes.append(img)
        else:
            if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
                raise ContainerError(f"{path}: rgb8 frames must be 8-bit RGB, got {img.dtype} {img.shape}")
            planes.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
    frame = np.stack(planes, axis=-1) if mode == "raw12" else planes[0]
    return frame.astype(np.float64) / levels


def write_ground_truth(out_dir: str, gt: GroundTruth) -> Dict[str, Any]:
    os.makedirs(os.path.join(out_dir, GT_DIR), exist_ok=True)
    export_pfm(gt.depth, os.path.join(out_dir, GT_FILES["depth"]))
    write_json(gt.trajectory.to_dict(), os.path.join(out_dir, GT_FILES["trajectory"]))
    write_json({"normal": gt.plane.unit_normal.tolist(), "offset": float(gt.plane.offset)},
               os.path.join(out_dir, GT_FILES["plane"]))
    cv2.imwrite(os.path.join(out_dir, GT_FILES["mask"]), np.where(gt.mask, 255, 0).astype(np.uint8))
    return dict(GT_FILES, intrinsics=gt.intrinsics.to_dict())


def write_container(out_dir: str, burst: BurstStack, gt: Optional[GroundTruth] = None) -> str:
    """Write `burst` (and optionally its ground truth) as a container directory."""
    os.makedirs(out_dir, exist_ok=True)
    for n in range(burst.num_frames):
        _write_frame(out_dir, burst.mode, n, burst.frames[n])
    meta = {
        "format_version": FORMAT_VERSION,
        "mode": burst.mode,
        "num_frames": burst.num_frames,
        "intrinsics": burst.intrinsics.to_dict(),
        "timestamps": [float(t) for t in burst.timestamps],
        "ground_truth": write_ground_truth(out_dir, gt) if gt is not None else None,
    }
    write_json(meta, os.path.join(out_dir, META_FILE))
    logger.info("wrote %d %s frames to %s", burst.num_frames, burst.mode, out_dir)
    return out_dir


def validate_meta(meta: Dict[str, Any], path: str = META_FILE) -> None:
    if not isinstance(meta, dict):
        raise ContainerError(f"{path}: top level must be an object")
    version = meta.get("format_version")
    if not isinstance(version, int):
        raise ContainerError(f"{path}: format_version must be an integer")
    if version > FORMAT_VERSION:
        raise ContainerError(f"{path}: container format version {version} is newer than the supported "
                             f"version {FORMAT_VERSION}; upgrade the reader")
    if version < 1:
        raise ContainerError(f"{path}: invalid format_version {version}")
    unknown = set(meta) - META_KEYS
    if unknown:
        raise ContainerError(f"{path}: unknown keys {sorted(unknown)}")
    missing = META_KEYS - {"ground_truth"} - set(meta)
    if missing:
        raise ContainerError(f"{path}: missing keys {sorted(missing)}")
    if meta["mode"] not in MODE_CHANNELS:
        raise ContainerError(f"{path}: unknown mode {meta['mode']!r}")
    if not isinstance(meta["num_frames"], int) or meta["num_frames"] < 2:
        raise ContainerError(f"{path}: num_frames must be an integer ≥ 2")
    if not isinstance(meta["timestamps"], list) or len(meta["timestamps"]) != meta["num_frames"]:
        raise ContainerError(f"{path}: need exactly num_frames timestamps")


def read_meta(in_dir: str) -> Dict[str, Any]:
    path = os.path.join(in_dir, META_FILE)
    meta = read_json(path)
    validate_meta(meta, path)
    return meta


def read_container(in_dir: str) -> BurstStack:
    meta = read_meta(in_dir)
    mode, N = meta["mode"], meta["num_frames"]

    expected = {name for n in range(N) for name in frame_files(mode, n)}
    present = {name for name in os.listdir(in_dir) if name.startswith("frame_") and name.endswith(".png")}
    if present != expected:
        extra, missing = sorted(present - expected), sorted(expected - present)
        raise ContainerError(f"{in_dir}: frame files disagree with num_frames={N} "
                             f"(missing {missing[:4]}, unexpected {extra[:4]})")

    try:
        K = Intrinsics.from_dict(meta["intrinsics"])
        frames = np.stack([_read_frame(in_dir, mode, n) for n in range(N)])
        return BurstStack(frames, np.asarray(meta["timestamps"], dtype=np.float64), K, mode)
    except ValueError as e:
        if isinstance(e, ContainerError):
            raise
        raise ContainerError(f"{in_dir}: {e}") from e


def read_ground_truth(in_dir: str) -> Optional[GroundTruth]:
    """Ground truth referenced by meta.json; None when the container carries none."""
    meta = read_meta(in_dir)
    refs = meta.get("ground_truth")
    if not refs:
        return None
    try:
        depth = read_pfm(os.path.join(in_dir, refs["depth"]))
        traj = PoseTrajectory.from_dict(read_json(os.path.join(in_dir, refs["trajectory"])))
        plane_data = read_json(os.path.join(in_dir, refs["plane"]))
        plane = PlaneParams(np.asarray(plane_data["normal"], dtype=np.float64), float(plane_data["offset"]))
        mask_img = cv2.imread(os.path.join(in_dir, refs["mask"]), cv2.IMREAD_UNCHANGED)
        if mask_img is None:
            raise ContainerError(f"{in_dir}: unreadable ground-truth mask")
        K = Intrinsics.from_dict(refs["intrinsics"])
    except (KeyError, PfmError, FileNotFoundError) as e:
        raise ContainerError(f"{in_dir}: broken ground truth ({e})") from e
    except ValueError as e:
        if isinstance(e, ContainerError):
            raise
        raise ContainerError(f"{in_dir}: broken ground truth ({e})") from e
    if depth.depths.shape != (K.height, K.width) or mask_img.shape != depth.depths.shape:
        raise ContainerError(f"{in_dir}: ground-truth rasters do not match {K.width}x{K.height}")
    return GroundTruth(depth, traj, plane, mask_img > 0, K)


def inspect(in_dir: str) -> Tuple[BurstStack, Optional[GroundTruth]]:
    return read_container(in_dir), read_ground_truth(in_dir)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="验证并概述连拍容器")
    parser.add_argument("--input", "-i", required=True, help="容器目录")
    args = parser.parse_args()

    burst, gt = inspect(args.input)
    print(f"mode: {burst.mode}, frames: {burst.num_frames}, {burst.width}x{burst.height}x{burst.channels}")
    print(f"duration: {burst.timestamps[-1] - burst.timestamps[0]:.3f} s")
    print(f"ground truth: {'yes' if gt is not None else 'no'}")
