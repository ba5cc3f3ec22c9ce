import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sld3d.fields import (
    EmbeddingField,
    Mask2D,
    SegmentationField,
    Volume3D,
    bce_loss,
    dice_loss,
    l1_normalize_field,
    l2_normalize_field,
    load_volume,
    mip,
    read_mask_png,
    read_raw,
    write_mask_png,
    write_volume,
)

from .oracles import bce_loop, dice_loop, mip_loop

T = torch.tensor


def test_l2_three_four_five():
    raw = torch.zeros(2, 1, 1, 1, dtype=torch.float64)
    raw[:, 0, 0, 0] = T([3.0, 4.0])
    out = l2_normalize_field(raw)
    assert out[:, 0, 0, 0].tolist() == pytest.approx([0.6, 0.8], abs=1e-15)


def test_l2_unit_vectors_unchanged():
    raw = l2_normalize_field(torch.randn(5, 3, 3, 3, dtype=torch.float64))
    assert torch.allclose(l2_normalize_field(raw), raw, atol=1e-7, rtol=0)


def test_l2_random_field_norms():
    out = l2_normalize_field(torch.randn(16, 6, 5, 4, dtype=torch.float64))
    norms = np.sqrt((out.numpy() ** 2).sum(axis=0))
    assert np.abs(norms - 1).max() <= 1e-6
    EmbeddingField(out)


def test_l2_rejects_nonfinite():
    raw = torch.ones(2, 2, 2, 2)
    raw[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        l2_normalize_field(raw)


def test_l1_proportions_and_fallback():
    raw = torch.zeros(3, 1, 1, 2, dtype=torch.float64)
    raw[:, 0, 0, 0] = T([1.0, 1.0, 2.0])
    out = l1_normalize_field(raw)
    assert out[:, 0, 0, 0].tolist() == pytest.approx([0.25, 0.25, 0.5])
    assert out[:, 0, 0, 1].tolist() == pytest.approx([1 / 3] * 3)


def test_l1_random_field_sums():
    out = l1_normalize_field(torch.rand(8, 5, 4, 3, dtype=torch.float64))
    sums = out.numpy().sum(axis=0)
    assert np.abs(sums - 1).max() <= 1e-6
    SegmentationField(out)


def test_l1_rejects_negative():
    with pytest.raises(ValueError):
        l1_normalize_field(-torch.ones(2, 1, 1, 1))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 2, 3, 2), elements=st.floats(0.01, 10)))
def test_normalisations_idempotent(a):
    x = torch.from_numpy(a)
    once = l2_normalize_field(x)
    assert torch.allclose(l2_normalize_field(once), once, atol=1e-7, rtol=0)
    once = l1_normalize_field(x)
    assert torch.allclose(l1_normalize_field(once), once, atol=1e-7, rtol=0)


@pytest.mark.parametrize("axis", [1, 2, 3])
def test_mip_constant(axis):
    f = torch.full((3, 4, 5), 0.3)
    out = mip(f, axis)
    assert torch.all(out == 0.3)


def test_mip_shapes_follow_projection_order():
    f = torch.rand(3, 4, 5)
    assert mip(f, 1).shape == (3, 4)
    assert mip(f, 2).shape == (3, 5)
    assert mip(f, 3).shape == (4, 5)


def test_mip_single_voxel():
    f = torch.zeros(4, 5, 6)
    f[1, 2, 3] = 1
    s3 = mip(f, 3)
    assert s3[2, 3] == 1 and s3.sum() == 1


def test_mip_matches_loops_exactly():
    rng = np.random.default_rng(0)
    f = rng.random((5, 6, 7))
    for axis in (1, 2, 3):
        assert np.array_equal(mip(torch.from_numpy(f), axis).numpy(), mip_loop(f, axis))


def test_mip_gradient_goes_to_first_max():
    f = torch.zeros(1, 1, 3, requires_grad=True)
    mip(f, 1).sum().backward()
    assert f.grad.tolist() == [[[1.0, 0.0, 0.0]]]


def test_dice_examples():
    ones = torch.ones(8, dtype=torch.float64)
    assert float(dice_loss(ones, ones)) == pytest.approx(-15 / 17)
    a = torch.zeros(8, dtype=torch.float64)
    b = torch.zeros(8, dtype=torch.float64)
    a[:4] = 1
    b[4:] = 1
    assert float(dice_loss(a, b)) == pytest.approx(1 / 9)
    assert float(dice_loss(torch.zeros(8), torch.zeros(8))) == 1.0


def test_dice_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(3), torch.zeros(4))


def test_dice_symmetric_bce_not():
    rng = np.random.default_rng(1)
    a = torch.from_numpy(rng.random(20))
    b = torch.from_numpy(rng.random(20))
    assert float(dice_loss(a, b)) == pytest.approx(float(dice_loss(b, a)), abs=1e-15)
    assert abs(float(bce_loss(a, b)) - float(bce_loss(b, a))) > 1e-3


def test_dice_monotone_in_true_positives():
    ref = torch.zeros(20, dtype=torch.float64)
    ref[:10] = 1
    losses = []
    for tp in range(11):
        pred = torch.zeros(20, dtype=torch.float64)
        pred[:tp] = 1
        pred[10:15] = 1  # fixed false positives
        losses.append(float(dice_loss(pred, ref)))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_bce_examples():
    assert float(bce_loss(torch.ones(1), torch.ones(1))) == pytest.approx(0, abs=1e-6)
    assert float(bce_loss(torch.ones(1, dtype=torch.float64), torch.full((1,), 0.5, dtype=torch.float64))) == \
        pytest.approx(math.log(2))


def test_bce_matches_loop():
    rng = np.random.default_rng(2)
    y, p = rng.integers(0, 2, 30).astype(float), rng.random(30)
    assert float(bce_loss(torch.from_numpy(y), torch.from_numpy(p))) == pytest.approx(bce_loop(y, p), abs=1e-10)
    assert float(dice_loss(torch.from_numpy(y), torch.from_numpy(p))) == pytest.approx(dice_loop(y, p), abs=1e-12)


def test_volume_roundtrip(tmp_path):
    data = np.random.default_rng(3).random((4, 5, 6)).astype(np.float32) * 3 + 1
    write_volume(tmp_path / "v", data, spacing=(0.4, 0.4, 0.8), id="v")
    raw, meta = read_raw(tmp_path / "v")
    assert np.array_equal(raw, data)
    assert meta["dims"] == [4, 5, 6] and meta["spacing"] == [0.4, 0.4, 0.8]
    assert (tmp_path / "v.raw").stat().st_size == data.size * 4
    vol = load_volume(tmp_path / "v")
    assert vol.data.min() == 0 and vol.data.max() == 1 and vol.spacing == (0.4, 0.4, 0.8)


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume3D(np.full((2, 2, 2), np.inf))
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2, 2)), spacing=(1, 0, 1))


def test_mask_png_roundtrip(tmp_path):
    m = (np.random.default_rng(4).random((9, 7)) > 0.5).astype(np.float32)
    write_mask_png(tmp_path / "m.png", m)
    back = read_mask_png(tmp_path / "m.png")
    assert back.binary and np.array_equal(back.data, m)
    with pytest.raises(ValueError):
        Mask2D(np.full((2, 2), 0.5), binary=True)
