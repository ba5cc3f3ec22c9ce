"""Region embeddings, class prototypes and the contrastive clustering losses.

Also hosts the two pretraining objectives (patch instance discrimination and
hypersphere mixup) in the concrete form this package commits to.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .fields import BCE_CLAMP, NORM_FLOOR


@dataclass
class RdConfig:
    tau: float = 0.1
    C: int = 8
    K: int = 16
    patch_grid: int = 4

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


def _normalize_rows(x: torch.Tensor, what: str, generator: torch.Generator | None = None,
                    fallback: str = "fixed") -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    bad = norm < NORM_FLOOR
    if not bad.any():
        return x / norm
    warnings.warn(f"{what}: {int(bad.sum())} zero-sum vector(s) replaced by a fallback unit vector",
                  RuntimeWarning, stacklevel=3)
    if fallback == "random":
        fb = torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)
        fb = fb / fb.norm(dim=-1, keepdim=True)
    else:
        fb = torch.zeros_like(x)
        fb[..., 0] = 1
    return torch.where(bad, fb, x / norm.clamp_min(NORM_FLOOR))


def region_embed(v: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Mask-weighted, renormalised sum of voxel embeddings.

    v: (N, K, D, H, W) or (K, D, H, W); m: (N, C, D, H, W) or (C, D, H, W).
    Returns (N, C, K) (or (C, K) for unbatched input).
    """
    if v.shape[-3:] != m.shape[-3:] or v.dim() != m.dim():
        raise ValueError(f"embedding {tuple(v.shape)} and mask {tuple(m.shape)} are not aligned")
    if v.dim() == 4:
        return region_embed(v[None], m[None])[0]
    t = torch.einsum("nkdhw,ncdhw->nck", v, m)
    return _normalize_rows(t, "region_embed")


def prototypes(t: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Class centroids (C, K) from region embeddings (N, C, K) of one mini-batch."""
    if t.dim() != 3 or t.shape[0] < 1:
        raise ValueError("prototypes needs region embeddings shaped (N>=1, C, K)")
    return _normalize_rows(t.sum(dim=0), "prototypes", generator, fallback="random")


def _log_assign(sims: torch.Tensor, tau: float) -> torch.Tensor:
    return F.log_softmax(sims / tau, dim=-1)


def assignment_from_similarity(sims: torch.Tensor, tau: float) -> torch.Tensor:
    return _log_assign(sims, tau).exp()


def assignment_probability(t: torch.Tensor, protos: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """Softmax over classes of ``t . T_c / tau``; last dim of the result indexes classes."""
    return assignment_from_similarity(t @ protos.transpose(-1, -2), tau)


def loss_3drd(v: torch.Tensor, m: torch.Tensor, tau: float = 0.1,
              generator: torch.Generator | None = None) -> torch.Tensor:
    """Region discrimination loss: ``-sum_{n,c} log P_nc`` with batch prototypes."""
    t = region_embed(v, m)
    if t.dim() == 2:
        t = t[None]
    protos = prototypes(t, generator)
    logp = _log_assign(t @ protos.T, tau)  # (N, C, C)
    return -torch.diagonal(logp, dim1=-2, dim2=-1).sum()


def loss_entropy(m: torch.Tensor) -> torch.Tensor:
    """Mean per-entry binary entropy of the class probabilities."""
    p = m.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -(p * p.log() + (1 - p) * (1 - p).log()).mean()


def patch_embeddings(v: torch.Tensor, grid: int = 4) -> torch.Tensor:
    """Average voxel embeddings over a grid^3 partition and renormalise.

    (N, K, D, H, W) -> (N * grid^3, K), patches in raster order per image.
    """
    if any(s % grid for s in v.shape[-3:]):
        raise ValueError(f"spatial shape {tuple(v.shape[-3:])} is not divisible by a {grid}^3 grid")
    pooled = F.adaptive_avg_pool3d(v, grid)  # exact cell means when divisible
    n, k = pooled.shape[:2]
    flat = pooled.reshape(n, k, -1).transpose(1, 2).reshape(-1, k)
    return _normalize_rows(flat, "patch_embeddings")


def patch_nce(anchors: torch.Tensor, positives: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """InfoNCE over patches: row i of ``positives`` is the match for anchor i,
    every other row is a negative. Mean over anchors."""
    logits = anchors @ positives.T / tau
    target = torch.arange(anchors.shape[0], device=anchors.device)
    return F.cross_entropy(logits, target, reduction="mean")


def loss_patch_discrimination(v_a: torch.Tensor, v_b: torch.Tensor, tau: float = 0.1,
                              grid: int = 4) -> torch.Tensor:
    """Patch instance discrimination between two aligned views of the same crops."""
    if v_a.shape != v_b.shape:
        raise ValueError("the two views must have identical embedding shapes")
    return patch_nce(patch_embeddings(v_a, grid), patch_embeddings(v_b, grid), tau)


def _per_image(lam, n: int, ndim: int, like: torch.Tensor) -> torch.Tensor:
    lam = torch.as_tensor(lam, dtype=like.dtype, device=like.device)
    if lam.dim() == 0:
        lam = lam.expand(n)
    if lam.shape != (n,):
        raise ValueError(f"need one mixing weight per image ({n}), got shape {tuple(lam.shape)}")
    return lam.reshape(n, *([1] * (ndim - 1)))


def mixup_inputs(x_a: torch.Tensor, x_b: torch.Tensor, lam) -> torch.Tensor:
    """``lam * x_a + (1 - lam) * x_b``; ``lam`` is a scalar or one weight per image."""
    w = _per_image(lam, x_a.shape[0], x_a.dim(), x_a)
    return w * x_a + (1 - w) * x_b


def loss_hypersphere_mixup(v_mix: torch.Tensor, v_a: torch.Tensor, v_b: torch.Tensor, lam,
                           grid: int = 4) -> torch.Tensor:
    """Pull patch embeddings of a mixed input toward the renormalised mix of the
    source embeddings; mean of ``1 - cos`` over patches."""
    p_m = patch_embeddings(v_mix, grid)
    w = _per_image(lam, v_mix.shape[0], 1, v_mix).repeat_interleave(grid**3)[:, None]
    target = _normalize_rows(w * patch_embeddings(v_a, grid) + (1 - w) * patch_embeddings(v_b, grid),
                             "hypersphere_mixup")
    return (1 - (p_m * target).sum(dim=-1)).mean()


def hypersphere_mixup_step(model, x_a: torch.Tensor, x_b: torch.Tensor, lam, grid: int = 4):
    """Run ``model`` on the two sources and their mix and return the mixup loss."""
    v, _ = model(torch.cat([x_a, x_b, mixup_inputs(x_a, x_b, lam)]))
    n = x_a.shape[0]
    return loss_hypersphere_mixup(v[2 * n:], v[:n], v[n:2 * n], lam, grid)
