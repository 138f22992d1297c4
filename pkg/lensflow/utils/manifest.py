import hashlib
import json
from pathlib import Path
from typing import Dict, List

MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(run_dir) -> Path:
    """List every file under run_dir (relative path -> sha256), sorted."""
    run_dir = Path(run_dir)
    files = {
        p.relative_to(run_dir).as_posix(): sha256_file(p)
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p != run_dir / MANIFEST_NAME
    }
    path = run_dir / MANIFEST_NAME
    path.write_text(json.dumps({"files": files}, indent=2, sort_keys=True))
    return path


def verify_manifest(run_dir) -> List[str]:
    """Relative paths whose content no longer matches the manifest (missing files included)."""
    run_dir = Path(run_dir)
    files: Dict[str, str] = json.loads((run_dir / MANIFEST_NAME).read_text())["files"]
    bad = []
    for rel, digest in files.items():
        p = run_dir / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad
