"""Orientation-randomised 3D U-Net backbone and the 2D mask discriminator."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fields import l1_normalize_field, l2_normalize_field
from .orientation import IDENTITY, OrientationElement, apply_orientation, sample_orientation


@dataclass
class BackboneConfig:
    K: int = 16
    C: int = 8
    vessel_channel: int = 1  # 1-based, in [1, C]
    encoder_blocks: int = 5
    base_channels: int = 16
    ori_cnn: bool = True
    norm: bool = True

    def __post_init__(self):
        if not 1 <= self.vessel_channel <= self.C:
            raise ValueError(f"vessel_channel must be in [1, {self.C}], got {self.vessel_channel}")
        if self.encoder_blocks < 2 or self.base_channels < 1:
            raise ValueError("need at least two encoder levels and a positive width")

    @property
    def divisor(self) -> int:
        return 2 ** (self.encoder_blocks - 1)

    @property
    def t_index(self) -> int:
        """0-based index of the vessel channel."""
        return self.vessel_channel - 1

    def to_dict(self):
        return asdict(self)


@dataclass
class DiscriminatorConfig:
    conv_channels: tuple[int, ...] = (16, 32, 32, 32)
    fc_widths: tuple[int, ...] = (32, 1)
    pool_after: tuple[int, ...] = (0, 1)
    input_size: int = 96

    def parameter_count(self) -> int:
        n, c_in = 0, 1
        for c in self.conv_channels:
            n += (c_in * 9 + 1) * c
            c_in = c
        for w in self.fc_widths:
            n += (c_in + 1) * w
            c_in = w
        return n


def conv_stack(c_in: int, c_out: int, norm: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(2):
        layers.append(nn.Conv3d(c_in if i == 0 else c_out, c_out, 3, padding=1))
        if norm:
            layers.append(nn.InstanceNorm3d(c_out, affine=True))
        layers.append(nn.LeakyReLU(0.01))
    return nn.Sequential(*layers)


class OriBlock(nn.Module):
    """Wraps a conv stack: reorient features, convolve, restore orientation.

    One group element is drawn per forward pass in training mode; in eval
    mode (or with ``enabled=False``) the identity is used.
    """

    def __init__(self, stack: nn.Module, enabled: bool = True):
        super().__init__()
        self.stack = stack
        self.enabled = enabled
        self.generator: torch.Generator | None = None
        self.last_orientation: OrientationElement = IDENTITY

    def forward(self, x: torch.Tensor, g: OrientationElement | None = None) -> torch.Tensor:
        if g is None:
            if self.training and self.enabled:
                if self.generator is None:
                    raise RuntimeError("OriBlock needs a generator in training mode")
                g = sample_orientation(self.generator, x.shape)
            else:
                g = IDENTITY
        self.last_orientation = g
        return apply_orientation(self.stack(apply_orientation(x, g)), g.inverse())


class SLDNet(nn.Module):
    """3D U-Net with an l2-normalised embedding head and an l1-normalised clustering head."""

    def __init__(self, cfg: BackboneConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or BackboneConfig()
        widths = [cfg.base_channels * 2**i for i in range(cfg.encoder_blocks)]
        self.encoders = nn.ModuleList()
        c_in = 1
        for w in widths:
            self.encoders.append(OriBlock(conv_stack(c_in, w, cfg.norm), cfg.ori_cnn))
            c_in = w
        self.decoders = nn.ModuleList(
            OriBlock(conv_stack(widths[i + 1] + widths[i], widths[i], cfg.norm), cfg.ori_cnn)
            for i in range(cfg.encoder_blocks - 1)
        )
        b = widths[0]
        self.embed_head = nn.Sequential(nn.Conv3d(b, b, 3, padding=1), nn.LeakyReLU(0.01), nn.Conv3d(b, cfg.K, 1))
        self.cluster_head = nn.Sequential(nn.Conv3d(b, b, 3, padding=1), nn.LeakyReLU(0.01), nn.Conv3d(b, cfg.C, 1))
        self.generator = torch.Generator()
        self.seed(seed)

    def seed(self, seed: int):
        self.generator.manual_seed(seed)
        for blk in self.ori_blocks():
            blk.generator = self.generator

    def ori_blocks(self):
        return [m for m in self.modules() if isinstance(m, OriBlock)]

    def check_input(self, x: torch.Tensor):
        if x.dim() != 5 or x.shape[1] != 1:
            raise ValueError(f"expected (N, 1, D, H, W) input, got {tuple(x.shape)}")
        div = self.cfg.divisor
        bad = [s for s in x.shape[2:] if s % div]
        if bad:
            pads = [(-s) % div for s in x.shape[2:]]
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {div}; pad by {pads} (D, H, W)"
            )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self.check_input(x)
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = F.max_pool3d(x, 2)
        for i in reversed(range(len(self.decoders))):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.decoders[i](torch.cat([x, skips[i]], dim=1))
        v = l2_normalize_field(self.embed_head(x))
        m = l1_normalize_field(F.softplus(self.cluster_head(x)))
        return v, m

    def vessel_probability(self, x: torch.Tensor) -> torch.Tensor:
        return self(x)[1][:, self.cfg.t_index]


class Discriminator(nn.Module):
    """Small 2D classifier scoring how much a mask looks like a reference tree."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DiscriminatorConfig()
        convs, c_in = [], 1
        for c in cfg.conv_channels:
            convs.append(nn.Conv2d(c_in, c, 3, padding=1))
            c_in = c
        self.convs = nn.ModuleList(convs)
        fcs = []
        for w in cfg.fc_widths:
            fcs.append(nn.Linear(c_in, w))
            c_in = w
        self.fcs = nn.ModuleList(fcs)

    def forward(self, masks: torch.Tensor) -> torch.Tensor:
        if masks.dim() == 3:
            masks = masks.unsqueeze(1)
        size = self.cfg.input_size
        if masks.dim() != 4 or masks.shape[1] != 1 or tuple(masks.shape[-2:]) != (size, size):
            raise ValueError(f"discriminator expects (N, 1, {size}, {size}) masks, got {tuple(masks.shape)}")
        x = masks
        for i, conv in enumerate(self.convs):
            x = F.leaky_relu(conv(x), 0.2)
            if i in self.cfg.pool_after:
                x = F.max_pool2d(x, 2)
        x = x.mean(dim=(-2, -1))
        for i, fc in enumerate(self.fcs):
            x = fc(x)
            if i < len(self.fcs) - 1:
                x = F.leaky_relu(x, 0.2)
        return torch.sigmoid(x).squeeze(-1)
