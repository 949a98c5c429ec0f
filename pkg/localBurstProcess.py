import argparse
import os
import shlex
import subprocess
import sys
import time
from typing import List, Optional

from artifactHasher import DEFAULT_EXCLUDES, ArtifactHasher, compare_manifests
from runConfig import RESOLVED_FILE

"""
@Data: 2025/5/29
@Desc: 本地一键流程：simulate → fit → eval → mesh，可选整链重跑并比较产物清单
"""

# resolved configs record their own output directory
RERUN_EXCLUDES = DEFAULT_EXCLUDES + (RESOLVED_FILE,)
CLI = os.path.join(os.path.dirname(os.path.abspath(__file__)), "tremorDepth.py")


def run_command(command: List[str], description: Optional[str] = None) -> bool:
    if description:
        print(f"\n{'-' * 80}\n{description}\n{'-' * 80}")

    print(f"Running: {shlex.join(command)}")
    start_time = time.time()

    try:
        result = subprocess.run(command, check=True, text=True, capture_output=True)

        print(result.stdout)
        if result.stderr:
            print(f"Stderr: {result.stderr}")

        elapsed = time.time() - start_time
        print(f"Command completed in {elapsed:.2f} seconds")
        return True
    except subprocess.CalledProcessError as e:
        print(f"Command failed with exit code {e.returncode}")
        print(f"Stdout: {e.stdout}")
        print(f"Stderr: {e.stderr}")
        return False


def process_burst(config: Optional[str], work_dir: str, seed: Optional[int] = None,
                  iterations: Optional[int] = None) -> bool:
    burst_dir = os.path.join(work_dir, "burst")
    fit_dir = os.path.join(work_dir, "fit")
    os.makedirs(work_dir, exist_ok=True)

    base = [sys.executable, CLI]
    shared = ["--quiet"]
    if config:
        shared += ["--config", config]
    seeded = shared + (["--seed", str(seed)] if seed is not None else [])

    steps = {
        "simulate": "Render the synthetic burst",
        "fit": "Fit depth, image and trajectory",
        "eval": "Evaluate against ground truth",
        "mesh": "Export the depth mesh",
    }

    # 1. 合成连拍
    if not run_command(base + ["simulate", "--out", burst_dir] + seeded, steps["simulate"]):
        print("Simulation failed. Aborting.")
        return False

    # 2. 联合优化
    cmd = base + ["fit", "--burst", burst_dir, "--out", fit_dir] + seeded
    if iterations is not None:
        cmd += ["--iterations", str(iterations)]
    if not run_command(cmd, steps["fit"]):
        print("Fitting failed. Aborting.")
        return False

    depth_file = os.path.join(fit_dir, "depth.pfm")
    if not os.path.exists(depth_file):
        print(f"Depth map not found at {depth_file}. Aborting.")
        return False

    # 3. 评估
    if not run_command(base + ["eval", "--pred", depth_file, "--gt", burst_dir, "--pose"] + shared, steps["eval"]):
        print("Evaluation failed. Aborting.")
        return False

    # 4. 网格导出
    cmd = base + ["mesh", "--depth", depth_file, "--meta", os.path.join(burst_dir, "meta.json"),
                  "--out", os.path.join(fit_dir, "mesh.obj")] + shared
    if not run_command(cmd, steps["mesh"]):
        print("Mesh export failed. Aborting.")
        return False

    print("\nProcess completed successfully!")
    print(f"Burst: {burst_dir}")
    print(f"Fit: {fit_dir}")
    return True


def check_determinism(first: str, second: str) -> bool:
    same = True
    for stage in ("burst", "fit"):
        diff = compare_manifests(ArtifactHasher(os.path.join(first, stage), RERUN_EXCLUDES).collect(),
                                 ArtifactHasher(os.path.join(second, stage), RERUN_EXCLUDES).collect())
        for kind, files in diff.items():
            for file in files:
                print(f"  {stage}/{file}: {kind}")
                same = False
    print("Artifacts are byte-identical" if same else "Artifacts differ between runs")
    return same


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", "-c", default=None, help="JSON 运行配置")
    parser.add_argument("--work", "-w", default="runs/local", help="工作目录")
    parser.add_argument("--seed", "-s", type=int, default=None)
    parser.add_argument("--iterations", "-n", type=int, default=None)
    parser.add_argument("--check-determinism", action="store_true", help="整链重跑一次并比较 md5 清单")

    args = parser.parse_args()

    ok = process_burst(args.config, args.work, args.seed, args.iterations)
    if ok and args.check_determinism:
        rerun = args.work.rstrip("/\\") + "_rerun"
        ok = process_burst(args.config, rerun, args.seed, args.iterations) and check_determinism(args.work, rerun)
    sys.exit(0 if ok else 1)
