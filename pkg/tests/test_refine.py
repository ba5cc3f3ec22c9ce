import numpy as np
import pytest
import torch

from sld3d.orientation import apply_orientation
from sld3d.refine import (
    Augmentation,
    RefinementConfig,
    build_labels,
    ensemble_predict,
    loss_rr,
    sample_augmentations,
)

from .oracles import labels_loop, loss_rr_loop


def test_config_validation():
    for bad in (0.5, 1.0, 0.3):
        with pytest.raises(ValueError):
            RefinementConfig(confidence=bad)
    with pytest.raises(ValueError):
        RefinementConfig(n_ensemble=0)
    with pytest.raises(ValueError, match="cannot be inverted"):
        RefinementConfig(augmentations=("orientation", "elastic"))


@pytest.mark.parametrize("val,y,q", [(0.95, 1, 1), (0.5, 0, 0), (0.1, 0, 1), (0.9, 1, 1), (0.11, 0, 0)])
def test_label_cases(val, y, q):
    out = build_labels(np.array([val]), 0.9)
    assert (out.labels[0], out.reliable[0]) == (y, q)


def test_labels_match_case_oracle():
    soft = np.random.default_rng(0).random(5000)
    out = build_labels(soft, 0.9)
    y, q = labels_loop(soft, 0.9)
    assert np.array_equal(out.labels, y) and np.array_equal(out.reliable, q)


def test_confidence_monotone():
    soft = np.random.default_rng(1).random(2000)
    counts = [build_labels(soft, vc).reliable.sum() for vc in (0.55, 0.7, 0.8, 0.9, 0.99)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_loss_rr_examples():
    f = torch.rand(3, 4, 4)
    assert float(loss_rr(f, torch.ones_like(f), torch.zeros_like(f))) == 1.0
    y = (torch.rand(3, 4, 4) > 0.5).float()
    S = float(y.sum())
    assert float(loss_rr(y, y, torch.ones_like(y))) == pytest.approx((-2 * S + 1) / (2 * S + 1))
    with pytest.raises(ValueError):
        loss_rr(f, y[:2], y)


def test_loss_rr_oracle_and_sparsity():
    rng = np.random.default_rng(2)
    f = torch.from_numpy(rng.random((2, 4, 4, 4))).requires_grad_(True)
    y = torch.from_numpy((rng.random((2, 4, 4, 4)) > 0.5).astype(np.float64))
    q = torch.from_numpy((rng.random((2, 4, 4, 4)) > 0.4).astype(np.float64))
    loss = loss_rr(f, y, q)
    assert float(loss) == pytest.approx(loss_rr_loop(f.detach().numpy(), y.numpy(), q.numpy()), abs=1e-10)
    loss.backward()
    assert torch.all(f.grad[q == 0] == 0)


def test_loss_rr_near_half_confidence_is_plain_dice():
    from sld3d.fields import dice_loss
    rng = np.random.default_rng(3)
    soft = rng.random((4, 4, 4))
    lab = build_labels(soft, 0.5 + 1e-12)
    f = torch.from_numpy(rng.random((4, 4, 4)))
    y = torch.from_numpy(lab.labels)
    q = torch.from_numpy(lab.reliable)
    assert lab.reliable.mean() > 0.99
    if lab.reliable.all():
        assert float(loss_rr(f, y, q)) == pytest.approx(float(dice_loss(f, y.double())), abs=1e-12)


def test_ensemble_singleton_identity():
    x = np.random.default_rng(4).random((4, 4, 4)).astype(np.float32)
    pred = lambda t: t[:, 0] ** 2
    out = ensemble_predict(x, pred, RefinementConfig(n_ensemble=1))
    assert np.allclose(out, x.astype(np.float64) ** 2, atol=1e-7)


def test_ensemble_constant_predictor():
    x = np.zeros((4, 4, 4), dtype=np.float32)
    out = ensemble_predict(x, lambda t: torch.full(t.shape[:1] + t.shape[2:], 0.7), RefinementConfig(),
                           np.random.default_rng(0))
    assert np.allclose(out, 0.7, atol=1e-7)


def test_ensemble_loop_oracle_and_permutation_invariance():
    rng = np.random.default_rng(5)
    x = rng.random((4, 4, 4)).astype(np.float32)
    w = torch.from_numpy(rng.random((4, 4, 4)).astype(np.float32))

    def stub(t):  # position dependent, so the geometry mapping matters
        return torch.sigmoid(t[:, 0] * w)

    cfg = RefinementConfig()
    augs = sample_augmentations(cfg, x.shape, np.random.default_rng(6))
    assert augs[0] == Augmentation()
    out = ensemble_predict(x, stub, cfg, augs=augs)
    acc = np.zeros(x.shape)
    for a in augs:
        xin = apply_orientation(torch.from_numpy(x) * a.scale, a.orientation)
        p = stub(xin[None, None])[0]
        acc += apply_orientation(p, a.orientation.inverse()).double().numpy()
    assert np.abs(out - acc / len(augs)).max() < 1e-7
    shuffled = ensemble_predict(x, stub, cfg, augs=augs[::-1])
    assert np.abs(out - shuffled).max() < 1e-12
