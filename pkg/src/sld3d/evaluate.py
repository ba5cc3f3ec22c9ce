"""Overlap metrics, tiled full-volume inference and MIP export."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .fields import mip, write_mask_png


def confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, fn, tn


def overlap_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float | None]:
    """DSC, precision and recall of a binary prediction; ``None`` where the denominator is zero."""
    tp, fp, fn, _ = confusion(pred, gt)

    def ratio(num, den):
        return num / den if den else None

    return {"dsc": ratio(2 * tp, 2 * tp + fp + fn), "pr": ratio(tp, tp + fp), "rr": ratio(tp, tp + fn)}


def _starts(n: int, crop: int, stride: int) -> list[int]:
    if n <= crop:
        return [0]
    starts = list(range(0, n - crop + 1, stride))
    if starts[-1] != n - crop:
        starts.append(n - crop)
    return starts


@torch.no_grad()
def sliding_window_predict(model, volume, crop: int = 64, overlap: float = 0.5) -> np.ndarray:
    """Vessel probability for a whole (D, H, W) volume.

    The volume is zero-padded up to the network divisor and at least one
    crop, tiled with the given fractional overlap, and overlapping tiles are
    averaged.
    """
    was_training = model.training
    model.eval()
    try:
        x = torch.as_tensor(np.asarray(volume, dtype=np.float32))
        div = model.cfg.divisor
        shape = tuple(x.shape)
        tile = [min(crop, math.ceil(s / div) * div) for s in shape]
        padded = [max(t, math.ceil(s / div) * div) for s, t in zip(shape, tile)]
        xp = F.pad(x, [p for s, t in reversed(list(zip(shape, padded))) for p in (0, t - s)])
        acc = torch.zeros(padded, dtype=torch.float64)
        cnt = torch.zeros(padded, dtype=torch.float64)
        strides = [max(1, int(t * (1 - overlap))) for t in tile]
        ranges = [_starts(p, t, st) for p, t, st in zip(padded, tile, strides)]
        for d0, h0, w0 in itertools.product(*ranges):
            sl = (slice(d0, d0 + tile[0]), slice(h0, h0 + tile[1]), slice(w0, w0 + tile[2]))
            prob = model.vessel_probability(xp[sl][None, None])[0]
            acc[sl] += prob.double()
            cnt[sl] += 1
        out = (acc / cnt)[: shape[0], : shape[1], : shape[2]]
        return out.float().numpy()
    finally:
        model.train(was_training)


def predictor_for(model, crop: int, overlap: float = 0.5):
    """Adapter: (1, 1, D, H, W) tensor -> (1, D, H, W) vessel probability via tiling."""
    def predict(x: torch.Tensor) -> torch.Tensor:
        return torch.from_numpy(sliding_window_predict(model, x[0, 0].numpy(), crop, overlap))[None]
    return predict


@dataclass
class EvalReport:
    split: str
    threshold: float
    per_volume: dict[str, dict[str, float | None]] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def mean(self) -> dict[str, float | None]:
        out = {}
        for key in ("dsc", "pr", "rr"):
            vals = [m[key] for m in self.per_volume.values() if m[key] is not None]
            skipped = len(self.per_volume) - len(vals)
            if skipped:
                warnings.warn(f"{key}: {skipped} volume(s) with undefined value excluded from the mean",
                              RuntimeWarning, stacklevel=2)
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {"split": self.split, "threshold": self.threshold, "per_volume": self.per_volume,
                "mean": self.mean, "provenance": self.provenance}


def evaluate_model(model, reader, split: str = "test", crop: int = 64, threshold: float = 0.5,
                   overlap: float = 0.5, provenance: dict | None = None) -> EvalReport:
    report = EvalReport(split, threshold, provenance=dict(provenance or {}))
    for vid in reader.ids(split):
        gt = reader.ground_truth(vid).data
        prob = sliding_window_predict(model, reader.volume(vid).data, crop, overlap)
        report.per_volume[vid] = overlap_metrics(prob > threshold, gt)
    return report


def export_mips(model, volume: np.ndarray, out_dir, stem: str = "volume", crop: int = 64) -> list[Path]:
    """Write the three prediction MIPs and three intensity MIPs as 8-bit PNGs."""
    out_dir = Path(out_dir)
    prob = torch.from_numpy(sliding_window_predict(model, volume, crop))
    vol = torch.as_tensor(np.asarray(volume, dtype=np.float32))
    paths = []
    for kind, field_ in (("pred", prob), ("image", vol)):
        for axis in (1, 2, 3):
            p = out_dir / f"{stem}_{kind}_mip{axis}.png"
            write_mask_png(p, mip(field_, axis).numpy())
            paths.append(p)
    return paths
