"""Training configuration, named profiles and override parsing."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .network import BackboneConfig
from .refine import RefinementConfig
from .shape import CropOverlapConfig

STAGES = ("pretrain", "sld", "refine")


@dataclass
class LossWeights:
    pd: float = 1.0
    hm: float = 1.0
    rd: float = 10.0
    adv: float = 1.0
    e: float = 0.1

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    profile: str = "paper"
    seed: int = 0
    epochs: dict = field(default_factory=lambda: {"pretrain": 100, "sld": 40, "refine": 60})
    steps_per_epoch: int = 200
    crop_size: int = 96
    crops_per_batch: int = 4
    mixup_per_batch: int = 2
    batches_per_iter: int = 3
    n_refs: int = 24
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    use_con: bool = True
    tau: float = 0.1
    patch_grid: int = 4
    view_noise: float = 0.02
    view_jitter: tuple = (0.9, 1.1)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    crop_overlap: CropOverlapConfig = field(default_factory=CropOverlapConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    eval_threshold: float = 0.5
    eval_overlap: float = 0.5
    ref_dir: str | None = None
    single_ref: str | None = None

    def __post_init__(self):
        if set(self.epochs) != set(STAGES):
            raise ValueError(f"epochs must name exactly the stages {STAGES}")
        if self.crop_size % self.backbone.divisor:
            raise ValueError(f"crop size {self.crop_size} not divisible by {self.backbone.divisor}")
        if self.crop_size % self.patch_grid:
            raise ValueError("crop size must be divisible by the patch grid")
        if self.crops_per_batch < 2 and self.mixup_per_batch:
            raise ValueError("mixup needs at least two crops per batch")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"weights": LossWeights, "backbone": BackboneConfig,
                  "crop_overlap": CropOverlapConfig, "refinement": RefinementConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub = {k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()}
                d[key] = typ(**sub)
        for key in ("view_jitter",):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def paper_profile(**kw) -> TrainConfig:
    return TrainConfig(profile="paper", **kw)


def desk_profile(**kw) -> TrainConfig:
    """64^3 crops, 10/10/10 epochs of 50 steps; everything else as the full-scale profile."""
    base = dict(profile="desk", epochs={"pretrain": 10, "sld": 10, "refine": 10},
                steps_per_epoch=50, crop_size=64)
    base.update(kw)
    return TrainConfig(**base)


def smoke_profile(**kw) -> TrainConfig:
    """Single-core sized run used by the test suite: 32^3 crops and a narrow network."""
    base = dict(profile="smoke", epochs={"pretrain": 3, "sld": 8, "refine": 4},
                steps_per_epoch=20, crop_size=32, batches_per_iter=1, n_refs=8,
                backbone=BackboneConfig(base_channels=8),
                refinement=RefinementConfig(n_ensemble=4))
    base.update(kw)
    return TrainConfig(**base)


PROFILES = {"paper": paper_profile, "desk": desk_profile, "smoke": smoke_profile}


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    """Apply ``key=value`` strings; dotted keys reach nested sections (``epochs.sld=5``)."""
    d = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise KeyError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = _coerce(value)
    return TrainConfig.from_dict(d)


def load_config(profile: str = "desk", path: str | Path | None = None, overrides=()) -> TrainConfig:
    if profile not in PROFILES:
        raise KeyError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = PROFILES[profile]()
    if path is not None:
        file_items = json.loads(Path(path).read_text())
        cfg = apply_overrides(cfg, [f"{k}={json.dumps(v)}" for k, v in _flatten(file_items)])
    return apply_overrides(cfg, overrides)


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
