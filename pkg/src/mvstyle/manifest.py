"""Run manifests: what was run, on which inputs, producing which files."""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digests(paths, root=None) -> dict[str, str]:
    """Digest every file under ``paths``; keys are relative to ``root`` when given."""
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += [f for f in sorted(p.rglob("*")) if f.is_file()]
        elif p.is_file():
            files.append(p)
    return {str(f.relative_to(root) if root else f): file_digest(f) for f in files}


def versions() -> dict[str, str]:
    from . import __version__

    return {
        "mvstyle": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    versions: dict[str, str] = field(default_factory=versions)

    def add_inputs(self, *paths) -> None:
        self.inputs.update(tree_digests(paths))

    def add_artifacts(self, out_dir, *paths) -> None:
        self.artifacts.update(tree_digests(paths, root=out_dir))

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
