import math

import numpy as np
import pytest
import torch

from sld3d.fields import BCE_CLAMP, mip, write_mask_png
from sld3d.network import Discriminator
from sld3d.shape import (
    CropOverlapConfig,
    crop_and_overlap,
    load_reference_dir,
    loss_adversarial,
    loss_discriminator,
    prediction_mips,
    reference_batch,
)
from sld3d.synthetic import generate_reference_mask, reference_spec

from .oracles import bce_loop


class ConstDisc(torch.nn.Module):
    """Stand-in discriminator returning a fixed score per input."""

    def __init__(self, value):
        super().__init__()
        self.cfg = Discriminator().cfg
        self.value = value
        self.w = torch.nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, x):
        return torch.full((x.shape[0],), self.value, dtype=torch.float64) + 0 * self.w


@pytest.fixture(scope="module")
def sources():
    return [generate_reference_mask(reference_spec(s)) for s in range(4)]


def test_config_validation():
    with pytest.raises(ValueError):
        CropOverlapConfig(crop_scale=(0.0, 0.5))
    with pytest.raises(ValueError):
        CropOverlapConfig(n_patches=(3, 2))
    with pytest.raises(ValueError):
        crop_and_overlap([])


def test_identity_crop(sources):
    src = (np.random.default_rng(0).random((96, 96)) > 0.7).astype(np.float32)
    cfg = CropOverlapConfig(crop_scale=(1.0, 1.0))
    out = crop_and_overlap([src], cfg, np.random.default_rng(1), k=1)
    assert np.array_equal(out, src)


def test_all_zero_sources():
    out = crop_and_overlap([np.zeros((50, 70))], rng=np.random.default_rng(0))
    assert out.shape == (96, 96) and not out.any()


def test_outputs_binary_and_sized(sources):
    rng = np.random.default_rng(2)
    batch = reference_batch(sources, 24, rng=rng)
    assert batch.shape == (24, 96, 96)
    assert set(np.unique(batch)) <= {0.0, 1.0}


def test_union_monotone(sources):
    cfg = CropOverlapConfig()
    a = crop_and_overlap(sources, cfg, np.random.default_rng(3), k=2)
    b = crop_and_overlap(sources, cfg, np.random.default_rng(3), k=3)
    assert np.all(b >= a)


def test_density_ordering(sources):
    rng = np.random.default_rng(4)
    few = np.mean([crop_and_overlap(sources, CropOverlapConfig(n_patches=(1, 2)), rng).mean() for _ in range(200)])
    many = np.mean([crop_and_overlap(sources, CropOverlapConfig(n_patches=(5, 6)), rng).mean() for _ in range(200)])
    assert many > few


def test_reference_dir(tmp_path, sources):
    for i, s in enumerate(sources):
        write_mask_png(tmp_path / f"ref_{i:03d}.png", s)
    assert len(load_reference_dir(tmp_path)) == 4
    assert len(load_reference_dir(tmp_path, single="ref_002")) == 1
    with pytest.raises(FileNotFoundError):
        load_reference_dir(tmp_path, single="nope")


def test_prediction_mips_order():
    vessel = torch.rand(2, 8, 8, 8)
    s = prediction_mips(vessel, size=8)
    assert s.shape == (6, 1, 8, 8)
    assert torch.equal(s[4, 0], mip(vessel[1], 2))


def test_discriminator_loss_examples():
    refs = torch.zeros(3, 1, 96, 96)
    fakes = torch.zeros(4, 1, 96, 96)
    assert float(loss_discriminator(ConstDisc(0.5), refs, fakes)) == pytest.approx(2 * math.log(2))
    assert float(loss_adversarial(ConstDisc(0.5), fakes)) == pytest.approx(math.log(2))
    assert float(loss_adversarial(ConstDisc(1.0), fakes)) < 1e-6
    with pytest.raises(ValueError):
        loss_discriminator(ConstDisc(0.5), torch.zeros(3, 1, 64, 64), fakes)


def test_discriminator_loss_composition():
    torch.manual_seed(0)
    disc = Discriminator().double()
    refs = (torch.rand(3, 1, 96, 96, dtype=torch.float64) > 0.5).double()
    fakes = torch.rand(4, 1, 96, 96, dtype=torch.float64)
    pr, pf = disc(refs).detach().numpy(), disc(fakes).detach().numpy()
    expected = bce_loop(np.ones(3), pr) + bce_loop(np.zeros(4), pf)
    assert float(loss_discriminator(disc, refs, fakes)) == pytest.approx(expected, abs=1e-10)


def test_discriminator_loss_blocks_generator_gradient():
    disc = Discriminator()
    fakes = torch.rand(2, 1, 96, 96, requires_grad=True)
    loss_discriminator(disc, torch.zeros(2, 1, 96, 96), fakes).backward()
    assert fakes.grad is None
    assert any(p.grad is not None for p in disc.parameters())


def test_mip_gradient_sparsity():
    torch.manual_seed(1)
    field = torch.rand(1, 8, 8, 8, dtype=torch.float64, requires_grad=True)
    disc = Discriminator().double()
    loss_adversarial(disc, prediction_mips(field, 96)).backward()
    grad = field.grad[0]
    support = torch.zeros_like(grad, dtype=torch.bool)
    f = field.detach()[0]
    for axis, dim in ((1, 2), (2, 1), (3, 0)):
        idx = f.argmax(dim=dim, keepdim=True)
        support.scatter_(dim, idx, True)
    assert torch.all(grad[~support] == 0)


def test_clamp_floor():
    assert BCE_CLAMP == 1e-7
