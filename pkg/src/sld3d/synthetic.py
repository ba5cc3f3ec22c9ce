"""Procedural tree-shaped vessel phantoms (3D) and independent 2D tree masks."""
from __future__ import annotations

import json
import shutil
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .fields import _atomic_write, write_mask_png, write_volume


@dataclass(frozen=True)
class TreeSpec:
    seed: int = 0
    depth: int = 4
    root_radius: float = 3.0
    radius_decay: float = 0.75
    branch_angle: tuple[float, float] = (0.4, 0.9)
    bifurcation_prob: float = 0.9
    size: int = 64
    root_length: float = 0.6  # fraction of the side length
    length_decay: float = 0.8
    noise: float = 0.1
    fg_mean: float = 0.8
    bg_mean: float = 0.2
    margin: int = 2

    def validate(self):
        if self.depth < 1:
            raise ValueError("tree depth must be at least 1 (an empty tree has no vessels)")
        if self.root_radius < 0.5:
            raise ValueError("root radius must be at least 0.5 voxel")
        if self.size < 2 * (self.margin + self.root_radius + 2):
            raise ValueError(f"size {self.size} is too small for radius {self.root_radius} and margin {self.margin}")


def reference_spec(seed: int = 0, size: int = 128) -> TreeSpec:
    """Defaults for the 2D reference trees: deeper, relatively thinner branches."""
    return TreeSpec(seed=seed, depth=5, root_radius=3.0, radius_decay=0.8, size=size,
                    root_length=0.35, length_decay=0.8, branch_angle=(0.35, 0.8), noise=0.0)


def _random_unit_perp(d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    while True:
        r = rng.normal(size=d.shape)
        r -= r.dot(d) * d
        n = np.linalg.norm(r)
        if n > 1e-6:
            return r / n


def grow_tree(spec: TreeSpec, ndim: int, rng: np.random.Generator):
    """Segments (start, end, radius) of a random branching tree inside the box."""
    spec.validate()
    size = spec.size

    def bounds(r):
        lo = spec.margin + r + 1
        return lo, size - 1 - lo

    lo, hi = bounds(spec.root_radius)
    start = np.empty(ndim)
    start[0] = lo
    start[1:] = rng.uniform(0.4 * size, 0.6 * size, ndim - 1)
    start = np.clip(np.round(start), lo, hi)
    direction = np.zeros(ndim)
    direction[0] = 1.0
    direction = direction + 0.3 * _random_unit_perp(direction, rng)
    direction /= np.linalg.norm(direction)

    segments = []
    stack = [(start, direction, spec.root_length * size, spec.root_radius, 1)]
    while stack:
        p0, d, length, r, level = stack.pop()
        lo, hi = bounds(r)
        end = p0 + d * length
        if np.any(end < lo) or np.any(end > hi):
            # shorten along the ray until the end stays inside the box
            ts = [length]
            for k in range(ndim):
                if d[k] > 1e-9:
                    ts.append((hi - p0[k]) / d[k])
                elif d[k] < -1e-9:
                    ts.append((lo - p0[k]) / d[k])
            end = p0 + d * max(0.0, min(ts))
        end = np.clip(np.round(end), lo, hi)
        segments.append((p0, end, r))
        child_r = r * spec.radius_decay
        if level >= spec.depth or child_r < 0.5 or np.linalg.norm(end - p0) < 2:
            continue
        n_children = 2 if rng.random() < spec.bifurcation_prob else 1
        perp = _random_unit_perp(d, rng)
        for j in range(n_children):
            angle = rng.uniform(*spec.branch_angle)
            side = perp if j == 0 else -perp
            nd = np.cos(angle) * d + np.sin(angle) * side
            nd /= np.linalg.norm(nd)
            stack.append((end, nd, length * spec.length_decay, child_r, level + 1))
    return segments


def rasterize_capsules(segments, shape) -> np.ndarray:
    """Boolean mask of grid points within ``r`` of any segment."""
    mask = np.zeros(shape, dtype=bool)
    ndim = len(shape)
    for p0, p1, r in segments:
        lo = np.maximum(np.floor(np.minimum(p0, p1) - r), 0).astype(int)
        hi = np.minimum(np.ceil(np.maximum(p0, p1) + r) + 1, shape).astype(int)
        grids = np.meshgrid(*[np.arange(lo[k], hi[k]) for k in range(ndim)], indexing="ij")
        pts = np.stack(grids, axis=-1).astype(np.float64)
        seg = p1 - p0
        L2 = seg.dot(seg)
        if L2 > 0:
            t = np.clip(((pts - p0) @ seg) / L2, 0.0, 1.0)
            closest = p0 + t[..., None] * seg
        else:
            closest = p0
        dist2 = ((pts - closest) ** 2).sum(-1)
        region = tuple(slice(lo[k], hi[k]) for k in range(ndim))
        mask[region] |= dist2 <= r * r
    return mask


def capsule_volume(length: float, radius: float) -> float:
    return np.pi * radius**2 * length + 4.0 / 3.0 * np.pi * radius**3


def generate_volume(spec: TreeSpec) -> tuple[np.ndarray, np.ndarray]:
    """Noisy intensity volume and its binary ground truth, both (size,)*3."""
    rng = np.random.default_rng(spec.seed)
    segments = grow_tree(spec, 3, rng)
    gt = rasterize_capsules(segments, (spec.size,) * 3)
    if not gt.any():
        raise ValueError("generated tree is empty")
    vol = np.where(gt, spec.fg_mean, spec.bg_mean).astype(np.float64)
    if spec.noise > 0:
        vol += rng.normal(0.0, spec.noise, vol.shape)
    return np.clip(vol, 0, 1).astype(np.float32), gt.astype(np.uint8)


def generate_reference_mask(spec: TreeSpec | None = None) -> np.ndarray:
    """Binary 2D branching-tree mask of shape (size, size)."""
    spec = spec or reference_spec()
    rng = np.random.default_rng(spec.seed)
    mask = rasterize_capsules(grow_tree(spec, 2, rng), (spec.size, spec.size))
    return mask.astype(np.float32)


def _seed_ints(seq: np.random.SeedSequence, n: int) -> list[int]:
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in seq.spawn(n)]


def make_dataset(out_dir, n_train: int, n_val: int, n_test: int, seed: int = 0, size: int = 64,
                 n_refs: int = 16, ref_size: int = 128, spec: TreeSpec | None = None,
                 force: bool = False) -> dict:
    """Write volumes, ground truths, 2D references and ``manifest.json``.

    Ground truth ships for every split, including train; the trainer refuses to read it.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty; pass force=True to overwrite")
        shutil.rmtree(out)
    base = replace(spec or TreeSpec(), size=size)
    vol_seq, ref_seq = np.random.SeedSequence(seed).spawn(2)
    counts = {"train": n_train, "val": n_val, "test": n_test}
    seeds = _seed_ints(vol_seq, sum(counts.values()))
    if len(set(seeds)) != len(seeds):
        raise RuntimeError("seed collision between volumes")
    manifest = {"format": "sld3d-dataset/1", "seed": seed, "size": size,
                "splits": {}, "volumes": {}, "references": []}
    it = iter(seeds)
    for split, n in counts.items():
        ids = []
        for j in range(n):
            vid = f"{split}_{j:03d}"
            s = replace(base, seed=next(it))
            vol, gt = generate_volume(s)
            write_volume(out / "volumes" / vid, vol, id=vid)
            write_volume(out / "labels" / f"{vid}_gt", gt, id=f"{vid}_gt")
            manifest["volumes"][vid] = {
                "split": split, "image": f"volumes/{vid}", "label": f"labels/{vid}_gt",
                "provenance": {"generator": "tree3d", "seed": s.seed, "spec": asdict(s)},
            }
            ids.append(vid)
        manifest["splits"][split] = ids
    for j, rs in enumerate(_seed_ints(ref_seq, n_refs)):
        name = f"ref_{j:03d}.png"
        write_mask_png(out / "refs" / name, generate_reference_mask(reference_spec(rs, ref_size)))
        manifest["references"].append({"file": f"refs/{name}", "provenance": {"generator": "tree2d", "seed": rs}})
    _atomic_write(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest
