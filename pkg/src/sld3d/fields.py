"""Field containers, normalisation layers, projections and the shared losses.

Array conventions: spatial order is (D, H, W); batched tensors are
(N, channels, D, H, W). Every function here is pure.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

NORM_FLOOR = 1e-12
BCE_CLAMP = 1e-7

# MIP index -> reduced spatial axis (counted from the end).
# s1(d,h) = max_w, s2(d,w) = max_h, s3(h,w) = max_d
MIP_AXES = {1: -1, 2: -2, 3: -3}


@dataclass
class Volume3D:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be (D, H, W), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"volume {self.id!r} contains non-finite values")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class BinaryVolume3D:
    data: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"binary volume must be (D, H, W), got {self.data.shape}")
        if not np.all((self.data == 0) | (self.data == 1)):
            raise ValueError("binary volume has values outside {0, 1}")


@dataclass
class Mask2D:
    data: np.ndarray
    binary: bool = True
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {self.data.shape}")
        if self.data.min(initial=0) < 0 or self.data.max(initial=0) > 1:
            raise ValueError("mask values must lie in [0, 1]")
        if self.binary and not np.all((self.data == 0) | (self.data == 1)):
            raise ValueError("mask flagged binary has values outside {0, 1}")


@dataclass
class EmbeddingField:
    """Per-voxel unit vectors, shape (K, D, H, W)."""

    data: torch.Tensor
    tol: float = field(default=1e-5, repr=False)

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"embedding field must be (K, D, H, W), got {tuple(self.data.shape)}")
        norms = self.data.norm(dim=0)
        if not torch.all((norms - 1).abs() <= self.tol):
            raise ValueError("embedding field is not unit-norm per voxel")


@dataclass
class SegmentationField:
    """Per-voxel class probabilities, shape (C, D, H, W)."""

    data: torch.Tensor
    tol: float = field(default=1e-5, repr=False)

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"segmentation field must be (C, D, H, W), got {tuple(self.data.shape)}")
        d = self.data
        if d.min() < 0 or d.max() > 1:
            raise ValueError("segmentation probabilities outside [0, 1]")
        if not torch.all((d.sum(dim=0) - 1).abs() <= self.tol):
            raise ValueError("segmentation probabilities do not sum to 1 per voxel")


def _check_finite(x: torch.Tensor, what: str):
    if not torch.isfinite(x).all():
        raise ValueError(f"{what}: input contains non-finite values")


def l2_normalize_field(raw: torch.Tensor) -> torch.Tensor:
    """Project each voxel's channel vector onto the unit sphere.

    The channel axis is the fourth from the end, so both (K, D, H, W) and
    (N, K, D, H, W) inputs work.
    """
    _check_finite(raw, "l2_normalize_field")
    norm = raw.norm(dim=-4, keepdim=True).clamp_min(NORM_FLOOR)
    return raw / norm


def l1_normalize_field(raw: torch.Tensor) -> torch.Tensor:
    """Rescale nonnegative channel vectors to sum to one; all-zero voxels become uniform."""
    _check_finite(raw, "l1_normalize_field")
    if (raw < 0).any():
        raise ValueError("l1_normalize_field expects nonnegative activations")
    n_classes = raw.shape[-4]
    total = raw.sum(dim=-4, keepdim=True)
    empty = total <= 0
    safe = torch.where(empty, torch.ones_like(total), total)
    return torch.where(empty, torch.full_like(raw, 1.0 / n_classes), raw / safe)


def mip(volume: torch.Tensor, axis: int) -> torch.Tensor:
    """Maximum intensity projection over the last three dims.

    ``axis`` follows the projection numbering: 1 reduces W, 2 reduces H,
    3 reduces D. The gradient goes to the first maximal voxel along the ray.
    """
    if axis not in MIP_AXES:
        raise ValueError(f"axis must be one of 1, 2, 3, got {axis!r}")
    if volume.dim() < 3:
        raise ValueError("mip needs at least three spatial dims")
    _check_finite(volume, "mip")
    dim = MIP_AXES[axis]
    idx = volume.argmax(dim=dim, keepdim=True)
    return volume.gather(dim, idx).squeeze(dim)


def mips(volume: torch.Tensor) -> list[torch.Tensor]:
    return [mip(volume, a) for a in (1, 2, 3)]


def dice_loss(y: torch.Tensor, y_ref: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Signed soft-dice loss ``(-2*sum(y*y') + eps) / (sum(y') + sum(y) + eps)``.

    About -1 at perfect overlap of large masks; two empty masks give +1.
    """
    if y.shape != y_ref.shape:
        raise ValueError(f"dice_loss shape mismatch: {tuple(y.shape)} vs {tuple(y_ref.shape)}")
    inter = (y * y_ref).sum()
    return (-2 * inter + eps) / (y_ref.sum() + y.sum() + eps)


def bce_loss(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped away from 0 and 1."""
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    target = target.expand_as(pred)
    p = pred.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -(target * p.log() + (1 - target) * (1 - p).log()).mean()


# ---------------------------------------------------------------------------
# persistence


def _atomic_write(path: Path, payload: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(stem: str | Path, data: np.ndarray, spacing=(1.0, 1.0, 1.0), id: str = ""):
    """Write ``<stem>.raw`` (little-endian float32) and ``<stem>.json`` metadata."""
    stem = Path(stem)
    arr = np.ascontiguousarray(np.asarray(data), dtype="<f4")
    meta = {"dims": list(arr.shape), "spacing": [float(s) for s in spacing], "id": id, "dtype": "float32-le"}
    _atomic_write(stem.with_suffix(".raw"), arr.tobytes())
    _atomic_write(stem.with_suffix(".json"), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())


def read_raw(stem: str | Path) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    if stem.suffix in (".raw", ".json"):
        stem = stem.with_suffix("")
    meta = json.loads(stem.with_suffix(".json").read_text())
    arr = np.fromfile(stem.with_suffix(".raw"), dtype="<f4")
    dims = tuple(meta["dims"])
    if arr.size != int(np.prod(dims)):
        raise ValueError(f"{stem}: raw size {arr.size} does not match dims {dims}")
    return arr.reshape(dims).astype(np.float32), meta


def minmax_normalize(data: np.ndarray) -> np.ndarray:
    lo, hi = float(data.min()), float(data.max())
    if hi - lo <= 0:
        return np.zeros_like(data, dtype=np.float32)
    return ((data - lo) / (hi - lo)).astype(np.float32)


def load_volume(stem: str | Path) -> Volume3D:
    """Read an intensity volume and min-max normalise it to [0, 1]."""
    arr, meta = read_raw(stem)
    return Volume3D(minmax_normalize(arr), tuple(meta["spacing"]), meta.get("id", ""))


def load_binary_volume(stem: str | Path) -> BinaryVolume3D:
    arr, meta = read_raw(stem)
    return BinaryVolume3D((arr > 0.5).astype(np.uint8), meta.get("id", ""))


def write_mask_png(path: str | Path, mask: np.ndarray):
    arr = np.asarray(mask, dtype=np.float64)
    img = Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def read_mask_png(path: str | Path, binary: bool = True) -> Mask2D:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    if binary:
        arr = (arr >= 0.5).astype(np.float32)
    return Mask2D(arr, binary=binary, id=Path(path).stem)
