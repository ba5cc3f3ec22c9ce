"""Reference-mask synthesis (crop-and-overlap) and the adversarial shape losses."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .fields import Mask2D, bce_loss, mips, read_mask_png


@dataclass
class CropOverlapConfig:
    n_patches: tuple[int, int] = (2, 6)
    crop_scale: tuple[float, float] = (0.3, 0.8)
    output_size: int = 96
    binarize_threshold: float = 0.5

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must satisfy 0 < min <= max <= 1, got {self.crop_scale}")
        if not 1 <= self.n_patches[0] <= self.n_patches[1]:
            raise ValueError(f"n_patches must be a nonempty range of positive ints, got {self.n_patches}")


def resize2d(img: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.asarray(img, dtype=np.float32))[None, None]
    if tuple(t.shape[-2:]) == (size, size):
        return t[0, 0].numpy().copy()
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def _as_array(src) -> np.ndarray:
    return src.data if isinstance(src, Mask2D) else np.asarray(src)


def draw_patch(sources, cfg: CropOverlapConfig, rng: np.random.Generator) -> np.ndarray:
    """One random square crop from a random source, resized to the output size (not thresholded)."""
    src = _as_array(sources[int(rng.integers(len(sources)))])
    h, w = src.shape
    scale = rng.uniform(*cfg.crop_scale)
    side = max(1, int(round(scale * min(h, w))))
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    return resize2d(src[y0:y0 + side, x0:x0 + side], cfg.output_size)


def crop_and_overlap(sources, cfg: CropOverlapConfig | None = None,
                     rng: np.random.Generator | None = None, k: int | None = None) -> np.ndarray:
    """Union of k random resized crops, thresholded back to a binary mask."""
    if not sources:
        raise ValueError("crop_and_overlap needs at least one source mask")
    cfg = cfg or CropOverlapConfig()
    rng = rng if rng is not None else np.random.default_rng()
    if k is None:
        k = int(rng.integers(cfg.n_patches[0], cfg.n_patches[1] + 1))
    out = np.zeros((cfg.output_size, cfg.output_size), dtype=np.float32)
    for _ in range(k):
        np.maximum(out, draw_patch(sources, cfg, rng), out=out)
    return (out >= cfg.binarize_threshold).astype(np.float32)


def reference_batch(sources, n: int, cfg: CropOverlapConfig | None = None,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    return np.stack([crop_and_overlap(sources, cfg, rng) for _ in range(n)])


def load_reference_dir(ref_dir: str | Path, single: str | None = None) -> list[Mask2D]:
    """Binary PNG masks from a directory; ``single`` restricts to one file stem."""
    paths = sorted(Path(ref_dir).glob("*.png"))
    if single is not None:
        paths = [p for p in paths if p.stem == single or p.name == single]
    if not paths:
        raise FileNotFoundError(f"no reference masks found in {ref_dir}" + (f" matching {single!r}" if single else ""))
    return [read_mask_png(p) for p in paths]


def prediction_mips(vessel: torch.Tensor, size: int = 96) -> torch.Tensor:
    """All three MIPs of each (N, D, H, W) vessel map, resized to size x size.

    Returns (3N, 1, size, size) ordered s1_1, s2_1, s3_1, s1_2, ...
    """
    out = []
    for n in range(vessel.shape[0]):
        for s in mips(vessel[n]):
            out.append(F.interpolate(s[None, None], size=(size, size), mode="bilinear", align_corners=False))
    return torch.cat(out)


def _check_masks(x: torch.Tensor, size: int, what: str):
    if x.dim() != 4 or tuple(x.shape[1:]) != (1, size, size):
        raise ValueError(f"{what} must be (N, 1, {size}, {size}), got {tuple(x.shape)}")


def loss_discriminator(disc, refs: torch.Tensor, pred_mips: torch.Tensor) -> torch.Tensor:
    """Real/fake classification loss; the prediction MIPs are detached."""
    size = disc.cfg.input_size
    _check_masks(refs, size, "reference masks")
    _check_masks(pred_mips, size, "prediction MIPs")
    return bce_loss(1.0, disc(refs)) + bce_loss(0.0, disc(pred_mips.detach()))


def loss_adversarial(disc, pred_mips: torch.Tensor) -> torch.Tensor:
    """Generator loss: prediction MIPs should be scored as real."""
    _check_masks(pred_mips, disc.cfg.input_size, "prediction MIPs")
    return bce_loss(1.0, disc(pred_mips))
