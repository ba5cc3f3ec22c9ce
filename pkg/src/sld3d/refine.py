"""Ensembled pseudo labels, reliability masks and the masked dice loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .orientation import IDENTITY, OrientationElement, apply_orientation, sample_orientation

INVERTIBLE_AUGMENTATIONS = frozenset({"orientation", "intensity"})


@dataclass
class RefinementConfig:
    n_ensemble: int = 8
    confidence: float = 0.9
    augmentations: tuple[str, ...] = ("orientation", "intensity")
    intensity_jitter: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if not 0.5 < self.confidence < 1:
            raise ValueError(f"confidence rate must lie in (0.5, 1), got {self.confidence}")
        if self.n_ensemble < 1:
            raise ValueError("ensemble size must be at least 1")
        unknown = set(self.augmentations) - INVERTIBLE_AUGMENTATIONS
        if unknown:
            raise ValueError(f"augmentations {sorted(unknown)} cannot be inverted onto the input geometry")


@dataclass(frozen=True)
class Augmentation:
    orientation: OrientationElement = IDENTITY
    scale: float = 1.0


@dataclass
class PseudoLabelSet:
    soft: np.ndarray      # ensemble mean in [0, 1]
    labels: np.ndarray    # y, binary
    reliable: np.ndarray  # q, binary

    @property
    def reliable_fraction(self) -> float:
        return float(self.reliable.mean())


def sample_augmentations(cfg: RefinementConfig, shape, rng: np.random.Generator) -> list[Augmentation]:
    """First member is the identity; the rest are random draws from the configured family."""
    augs = [Augmentation()]
    for _ in range(cfg.n_ensemble - 1):
        g = sample_orientation(rng, shape) if "orientation" in cfg.augmentations else IDENTITY
        s = float(rng.uniform(*cfg.intensity_jitter)) if "intensity" in cfg.augmentations else 1.0
        augs.append(Augmentation(g, s))
    return augs


@torch.no_grad()
def ensemble_predict(x, predictor: Callable[[torch.Tensor], torch.Tensor], cfg: RefinementConfig | None = None,
                     rng: np.random.Generator | None = None,
                     augs: Sequence[Augmentation] | None = None) -> np.ndarray:
    """Mean vessel probability over augmented copies, mapped back to input geometry.

    ``predictor`` maps a (1, 1, D, H, W) tensor to (1, D, H, W) probabilities.
    """
    cfg = cfg or RefinementConfig()
    x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if augs is None:
        augs = sample_augmentations(cfg, x.shape, rng if rng is not None else np.random.default_rng(0))
    total = torch.zeros(x.shape, dtype=torch.float64)
    for aug in augs:
        xin = apply_orientation(x * aug.scale, aug.orientation)
        pred = predictor(xin.contiguous()[None, None])[0]
        total += apply_orientation(pred, aug.orientation.inverse()).double()
    return (total / len(augs)).numpy()


def build_labels(soft: np.ndarray, confidence: float = 0.9) -> PseudoLabelSet:
    """Threshold the ensemble mean at 0.5 and mark confident voxels.

    A voxel is unreliable only when strictly between ``1 - confidence`` and
    ``confidence``; the boundary values count as reliable.
    """
    soft = np.asarray(soft, dtype=np.float64)
    labels = (soft > 0.5).astype(np.uint8)
    # written as y + v_c <= 1 so that e.g. y = 0.1, v_c = 0.9 hits the boundary exactly
    reliable = ((soft + confidence <= 1.0) | (soft >= confidence)).astype(np.uint8)
    return PseudoLabelSet(soft, labels, reliable)


def loss_rr(pred: torch.Tensor, labels: torch.Tensor, reliable: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Dice loss restricted to reliable voxels."""
    if not (pred.shape == labels.shape == reliable.shape):
        raise ValueError(f"shape mismatch: {tuple(pred.shape)}, {tuple(labels.shape)}, {tuple(reliable.shape)}")
    labels = labels.to(pred.dtype)
    reliable = reliable.to(pred.dtype)
    fq = pred * reliable
    return (-2 * (labels * fq).sum() + eps) / ((labels * reliable).sum() + fq.sum() + eps)
