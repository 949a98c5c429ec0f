import argparse
import fnmatch
import hashlib
import json
import logging
import os
import sys
from typing import Dict, Iterable, List

"""
@Data: 2025/5/26
@Desc: 产物清单：对输出目录逐文件计算 md5，写入 manifest.json，并比较两次运行是否逐字节一致
"""

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
DEFAULT_EXCLUDES = ("*.log", MANIFEST_FILE)


class ArtifactHasher:
    def __init__(self, root: str, excludes: Iterable[str] = DEFAULT_EXCLUDES):
        self.root = os.path.abspath(root)
        self.excludes = tuple(excludes)
        self.manifest_file = os.path.join(self.root, MANIFEST_FILE)

    def _calculate_file_hash(self, file_path: str) -> str:
        hash_md5 = hashlib.md5()
        with open(file_path, "rb") as f:
            for chunk in iter(lambda: f.read(4096), b""):
                hash_md5.update(chunk)
        return hash_md5.hexdigest()

    def _excluded(self, rel_path: str) -> bool:
        name = os.path.basename(rel_path)
        return any(fnmatch.fnmatch(name, pattern) for pattern in self.excludes)

    def collect(self) -> Dict[str, str]:
        hashes = {}
        for root, dirs, files in os.walk(self.root):
            dirs.sort()
            for file in sorted(files):
                rel_path = os.path.relpath(os.path.join(root, file), self.root).replace(os.sep, "/")
                if self._excluded(rel_path):
                    continue
                hashes[rel_path] = self._calculate_file_hash(os.path.join(root, file))
        return hashes

    def write_manifest(self) -> Dict[str, str]:
        hashes = self.collect()
        with open(self.manifest_file, "w", encoding="utf-8") as f:
            json.dump({"files": hashes}, f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info("manifest: %d files hashed under %s", len(hashes), self.root)
        return hashes

    def load_manifest(self) -> Dict[str, str]:
        if not os.path.exists(self.manifest_file):
            return {}
        with open(self.manifest_file, "r", encoding="utf-8") as f:
            return json.load(f).get("files", {})


def compare_manifests(a: Dict[str, str], b: Dict[str, str]) -> Dict[str, List[str]]:
    return {
        "missing": sorted(set(a) - set(b)),
        "extra": sorted(set(b) - set(a)),
        "changed": sorted(k for k in set(a) & set(b) if a[k] != b[k]),
    }


def identical(a: Dict[str, str], b: Dict[str, str]) -> bool:
    return not any(compare_manifests(a, b).values())


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="为输出目录生成或比较 md5 清单")
    parser.add_argument("--path", "-p", required=True, help="输出目录")
    parser.add_argument("--compare", "-c", default=None, help="另一个输出目录，与之比较")
    args = parser.parse_args()

    hasher = ArtifactHasher(args.path)
    hashes = hasher.write_manifest()
    if args.compare is None:
        print(f"Hashed {len(hashes)} files into {hasher.manifest_file}")
        sys.exit(0)

    diff = compare_manifests(hashes, ArtifactHasher(args.compare).collect())
    if not any(diff.values()):
        print("Artifacts are byte-identical")
        sys.exit(0)
    for kind, files in diff.items():
        for file in files:
            print(f"  {kind}: {file}")
    sys.exit(1)
