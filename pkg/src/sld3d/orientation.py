"""Axis-permutation / flip group acting on the last three dims of a tensor."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class OrientationElement:
    permutation: tuple[int, int, int] = (0, 1, 2)
    flips: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        if sorted(self.permutation) != [0, 1, 2]:
            raise ValueError(f"permutation must be a bijection on (0, 1, 2): {self.permutation}")
        if len(self.flips) != 3:
            raise ValueError("flips needs one flag per spatial axis")

    @property
    def is_identity(self) -> bool:
        return self.permutation == (0, 1, 2) and not any(self.flips)

    def inverse(self) -> "OrientationElement":
        inv = [0, 0, 0]
        for i, p in enumerate(self.permutation):
            inv[p] = i
        # undoing "permute then flip" = flip first, then permute back; a flip of
        # axis j before permuting becomes a flip of the axis it lands on.
        flips = tuple(bool(self.flips[inv[j]]) for j in range(3))
        return OrientationElement(tuple(inv), flips)

    def preserves_shape(self, shape) -> bool:
        spatial = tuple(shape[-3:])
        return all(spatial[self.permutation[i]] == spatial[i] for i in range(3))


IDENTITY = OrientationElement()
ALL_ORIENTATIONS: tuple[OrientationElement, ...] = tuple(
    OrientationElement(tuple(p), tuple(bool(b) for b in f))
    for p in itertools.permutations(range(3))
    for f in itertools.product((False, True), repeat=3)
)


def sample_orientation(rng, shape=None) -> OrientationElement:
    """Draw a group element uniformly.

    ``rng`` is a ``torch.Generator`` or ``numpy.random.Generator``. With
    ``shape`` given, only elements that keep that spatial shape are drawn.
    """
    pool = ALL_ORIENTATIONS
    if shape is not None:
        pool = tuple(g for g in pool if g.preserves_shape(shape))
    if isinstance(rng, torch.Generator):
        i = int(torch.randint(len(pool), (1,), generator=rng).item())
    elif isinstance(rng, np.random.Generator):
        i = int(rng.integers(len(pool)))
    else:
        raise TypeError(f"unsupported random source {type(rng).__name__}")
    return pool[i]


def apply_orientation(x: torch.Tensor, g: OrientationElement) -> torch.Tensor:
    """Permute the three trailing spatial axes by ``g``, then flip."""
    if g.is_identity:
        return x
    if not g.preserves_shape(x.shape):
        raise ValueError(f"orientation {g} does not preserve spatial shape {tuple(x.shape[-3:])}")
    lead = x.dim() - 3
    out = x.permute(*range(lead), *(lead + p for p in g.permutation))
    dims = [lead + i for i in range(3) if g.flips[i]]
    if dims:
        out = out.flip(dims)
    return out


def apply_orientation_np(x: np.ndarray, g: OrientationElement) -> np.ndarray:
    return apply_orientation(torch.from_numpy(np.ascontiguousarray(x)), g).contiguous().numpy()
