from __future__ import annotations

import numpy as np
import pytest
import torch
from _oracles import gradient_check, mmd_linear_loop, mmd_rbf_loop
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from corrreg.losses import dice_loss, feature_samples, intensity_loss, mmd_loss, total_loss


def test_intensity_examples():
    a = np.random.default_rng(0).random((5, 6, 3))
    assert intensity_loss(a, a).item() == 0
    assert intensity_loss(np.zeros((4, 4)), np.ones((4, 4))).item() == 1
    assert intensity_loss(np.array([[0.0, 0.5]]), np.array([[0.5, 1.0]])).item() == pytest.approx(0.25)
    with pytest.raises(ValueError):
        intensity_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_dice_examples():
    m = np.zeros((20, 20))
    m[:10, :10] = 1
    assert dice_loss(m, m).item() == pytest.approx(0, abs=1e-6)
    other = np.zeros((20, 20))
    other[10:, 10:] = 1
    assert dice_loss(m, other).item() == pytest.approx(1, abs=1e-6)
    half = np.zeros((20, 20))
    half[5:15, :10] = 1  # 100 px, overlapping m in 50 px
    assert dice_loss(m, half).item() == pytest.approx(0.5, abs=1e-6)


def test_dice_batch_is_per_sample_mean():
    r = np.random.default_rng(1)
    a = (r.random((3, 1, 8, 8)) > 0.5).astype(float)
    b = (r.random((3, 1, 8, 8)) > 0.5).astype(float)
    per = [dice_loss(a[i], b[i]).item() for i in range(3)]
    assert dice_loss(a, b).item() == pytest.approx(np.mean(per), abs=1e-12)


def test_mmd_examples():
    x = np.random.default_rng(2).normal(size=(10, 3))
    assert mmd_loss(x, x).item() == 0
    assert mmd_loss(np.ones((4, 2)), np.zeros((5, 2))).item() == pytest.approx(2)
    assert mmd_loss(x, x, "rbf").item() == pytest.approx(0, abs=1e-10)


def test_mmd_oracles():
    r = np.random.default_rng(3)
    x, y = r.normal(size=(64, 5)), r.normal(0.3, 1.2, size=(64, 5))
    assert abs(mmd_loss(x, y).item() - mmd_linear_loop(x, y)) < 1e-8
    assert abs(mmd_loss(x, y, "rbf").item() - mmd_rbf_loop(x, y)) < 1e-6
    x2, y2 = r.normal(size=(7, 2)), r.normal(size=(9, 2))
    assert abs(mmd_loss(x2, y2, "rbf").item() - mmd_rbf_loop(x2, y2)) < 1e-6


sets = arrays(np.float64, st.tuples(st.integers(2, 12), st.just(3)), elements=st.floats(-5, 5))


@given(sets, sets, st.sampled_from(["linear", "rbf"]), st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_mmd_properties(x, y, kernel, rnd):
    v = mmd_loss(x, y, kernel).item()
    assert v >= 0
    assert mmd_loss(y, x, kernel).item() == pytest.approx(v, rel=1e-9, abs=1e-12)
    px = x[rnd.sample(range(len(x)), len(x))]
    py = y[rnd.sample(range(len(y)), len(y))]
    assert mmd_loss(px, py, kernel).item() == pytest.approx(v, rel=1e-9, abs=1e-10)
    assert mmd_loss(x, x, kernel).item() == pytest.approx(0, abs=1e-10)


def test_mmd_bad_inputs():
    with pytest.raises(ValueError):
        mmd_loss(np.zeros((3, 2)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        mmd_loss(np.zeros((1, 2)), np.zeros((3, 2)), "rbf")
    with pytest.raises(ValueError):
        mmd_loss(np.zeros((3, 2)), np.zeros((3, 2)), "poly")


@pytest.mark.parametrize("kernel", ["linear", "rbf"])
def test_mmd_gradient(kernel):
    g = torch.Generator().manual_seed(6)
    x = torch.randn(6, 3, generator=g, dtype=torch.float64)
    y = torch.randn(7, 3, generator=g, dtype=torch.float64) + 0.5
    assert gradient_check(lambda v: mmd_loss(v, y, kernel), x) < 1e-3
    assert gradient_check(lambda v: mmd_loss(x, v, kernel), y) < 1e-3


def test_dice_gradient():
    g = torch.Generator().manual_seed(7)
    a = torch.rand(2, 1, 4, 4, generator=g, dtype=torch.float64)
    b = torch.rand(2, 1, 4, 4, generator=g, dtype=torch.float64)
    assert gradient_check(lambda v: dice_loss(a, v), b) < 1e-3


def test_feature_samples():
    f = torch.arange(2 * 3 * 2 * 2, dtype=torch.float64).view(2, 3, 2, 2)
    loc = feature_samples(f)
    assert loc.shape == (8, 3)
    np.testing.assert_array_equal(loc[1], f[0, :, 0, 1])
    np.testing.assert_array_equal(feature_samples(f, "global"), f.mean(dim=(2, 3)))
    with pytest.raises(ValueError):
        feature_samples(f, "random")


def _batch(seed=0):
    r = np.random.default_rng(seed)
    img = torch.tensor(r.random((2, 3, 6, 6)))
    mask = torch.tensor((r.random((2, 1, 6, 6)) > 0.4).astype(float))
    feats = torch.tensor(r.normal(size=(20, 4)))
    return img, mask, feats


def test_total_perfect_alignment_is_zero():
    img, mask, feats = _batch()
    out = total_loss(img, img, mask, mask, feats, feats)
    assert out.total == pytest.approx(0, abs=1e-5)


@pytest.mark.parametrize("lam", [0.0, 0.01, 0.5])
def test_total_is_weighted_sum(lam):
    img, mask, feats = _batch(1)
    img2, mask2, feats2 = _batch(2)
    out = total_loss(img, img2, mask, mask2, feats, feats2 + 1, lambda_reg=lam)
    assert abs(out.total - (out.intensity + out.dice + lam * out.mmd)) <= 1e-9
    assert out.tensor.item() == pytest.approx(out.total, rel=1e-12)
    assert out.mmd > 0


def test_lambda_zero_excludes_mmd_from_gradient():
    img, mask, _ = _batch(3)
    f = torch.randn(10, 4, dtype=torch.float64, requires_grad=True)
    out = total_loss(img, img * 0.5, mask, mask, f, torch.zeros(10, 4, dtype=torch.float64), lambda_reg=0.0)
    assert out.total == pytest.approx(out.intensity + out.dice, abs=0)
    assert not out.tensor.requires_grad or torch.autograd.grad(out.tensor, f, allow_unused=True)[0] is None
    assert out.mmd > 0
