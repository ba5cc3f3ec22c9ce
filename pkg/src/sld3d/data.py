"""Manifest-backed dataset access with a ground-truth allowlist."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fields import BinaryVolume3D, Volume3D, load_binary_volume, load_volume
from .shape import load_reference_dir


class GroundTruthAccessError(PermissionError):
    """Raised when code without clearance asks for a label volume."""


class DatasetReader:
    """Reads volumes listed in ``manifest.json``.

    ``label_splits`` is the allowlist of splits whose ground truth may be
    read; training code constructs the reader with ``("val",)`` only.
    """

    def __init__(self, root, label_splits=("val", "test")):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no dataset manifest at {path}")
        self.manifest = json.loads(path.read_text())
        self.label_splits = frozenset(label_splits)
        self._cache: dict[str, Volume3D] = {}

    def ids(self, split: str) -> list[str]:
        try:
            return list(self.manifest["splits"][split])
        except KeyError:
            raise KeyError(f"split {split!r} not in manifest") from None

    def split_of(self, vid: str) -> str:
        return self.manifest["volumes"][vid]["split"]

    def volume(self, vid: str) -> Volume3D:
        if vid not in self._cache:
            self._cache[vid] = load_volume(self.root / self.manifest["volumes"][vid]["image"])
        return self._cache[vid]

    def ground_truth(self, vid: str) -> BinaryVolume3D:
        split = self.split_of(vid)
        if split not in self.label_splits:
            raise GroundTruthAccessError(f"ground truth of {vid!r} (split {split!r}) is not on the allowlist")
        entry = self.manifest["volumes"][vid]
        if "label" not in entry:
            raise FileNotFoundError(f"{vid!r} has no ground truth")
        return load_binary_volume(self.root / entry["label"])

    def volumes(self, split: str) -> list[np.ndarray]:
        return [self.volume(v).data for v in self.ids(split)]

    def references(self, ref_dir=None, single: str | None = None):
        return [m.data for m in load_reference_dir(ref_dir or self.root / "refs", single)]

