"""Workspace layout and small filesystem utilities.

All artifacts live under one root:

    <root>/datasets/<dataset>/<class_name>/*.jpg      evaluation images
    <root>/prompts/<style>/<dataset>/<class_name>/    prompt text files
    <root>/images/<style>/<dataset>/<class_name>/     generated images
    <root>/features/                                  feature cache files
    <root>/runs/<run_id>/                             evaluation outputs
    <root>/backends.json                              encoder registry
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

_UNSAFE = re.compile(r"[/\\\s]+")


def sanitize_name(name: str) -> str:
    """Make a class name safe as a single path component.

    Path separators and whitespace runs collapse to "_"; other characters
    pass through so names stay recognizable.
    """
    cleaned = _UNSAFE.sub("_", name.strip())
    if not cleaned or cleaned in (".", ".."):
        raise ValueError(f"cannot build a path component from {name!r}")
    return cleaned


def stable_digest(payload: Any) -> str:
    """Hex sha-256 of a JSON document with sorted keys.

    Equal payloads digest equally regardless of dict insertion order.
    """
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a
    half-written document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def atomic_write_json(path: str | Path, payload: Any) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


@dataclass
class Workspace:
    """Resolved directory layout rooted at ``root``."""

    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    @property
    def datasets_dir(self) -> Path:
        return self.root / "datasets"

    @property
    def features_dir(self) -> Path:
        return self.root / "features"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    @property
    def backends_file(self) -> Path:
        return self.root / "backends.json"

    def dataset_dir(self, dataset: str) -> Path:
        return self.datasets_dir / dataset

    def prompts_dir(self, style: str, dataset: str | None = None) -> Path:
        base = self.root / "prompts" / style
        return base if dataset is None else base / dataset

    def images_dir(self, style: str, dataset: str | None = None) -> Path:
        base = self.root / "images" / style
        return base if dataset is None else base / dataset

    def run_dir(self, run_id: str) -> Path:
        return self.runs_dir / run_id

    def feature_cache_file(self, backend_id: str) -> Path:
        return self.features_dir / f"{backend_id}.pfc"

    def ensure_layout(self) -> None:
        for d in (self.datasets_dir, self.features_dir, self.runs_dir,
                  self.root / "prompts", self.root / "images"):
            d.mkdir(parents=True, exist_ok=True)
