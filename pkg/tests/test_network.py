from __future__ import annotations

import numpy as np
import pytest
import torch
from _oracles import gradient_check, pearson_loop
from hypothesis import given, settings
from hypothesis import strategies as st

from corrreg.core import GridImage, Modality, identity_params
from corrreg.errors import CheckpointMismatch, ConfigError
from corrreg.ingest import RegistrationPair, prepare_network_input
from corrreg.network import (
    NetworkConfig,
    RegressionHead,
    build_model,
    correlate,
    correlation_index,
    correlation_position,
    extract_features,
    feature_l2norm,
    load_checkpoint,
    normalize_correlation,
    register,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def model():
    return build_model(NetworkConfig(fine_tune_last=True), seed=0)


def _pair(seed=0, shape=(120, 100)):
    r = np.random.default_rng(seed)
    fixed = GridImage(r.random((*shape, 1)), 0.1, Modality.XRAY)
    moving = GridImage(r.random((shape[0] + 10, shape[1] - 4, 3)), 0.1, Modality.HISTOLOGY)
    return RegistrationPair(fixed, moving)


def test_correlate_matches_loop_oracle():
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(20):
        a = torch.randn(1, 8, 4, 4, generator=g, dtype=torch.float64)
        b = torch.randn(1, 8, 4, 4, generator=g, dtype=torch.float64)
        ours = correlate(a, b)[0].numpy()
        worst = max(worst, np.abs(ours - pearson_loop(a[0].numpy(), b[0].numpy())).max())
    assert worst < 1e-5


def test_correlate_fiber_examples():
    def one(u, v):
        a = torch.tensor(u, dtype=torch.float64).view(1, 3, 1, 1)
        b = torch.tensor(v, dtype=torch.float64).view(1, 3, 1, 1)
        return correlate(a, b).item()

    assert one([1, 2, 3], [3, 2, 1]) == pytest.approx(-1, abs=1e-6)
    r = np.corrcoef([1, 2, 3], [1, 2, 4])[0, 1]
    assert one([1, 2, 3], [1, 2, 4]) == pytest.approx(r, abs=1e-12)
    assert one([1, 2, 3], [1, 2, 4]) == pytest.approx(0.982, abs=1e-3)


def test_self_correlation_diagonal():
    f = torch.randn(1, 16, 5, 5, dtype=torch.float64)
    c = correlate(f, f)[0]
    for i in range(5):
        for j in range(5):
            assert c[correlation_index(i, j, 5), i, j].item() == pytest.approx(1.0, abs=1e-12)


def test_index_packing():
    assert correlation_index(3, 1, 14) == 17
    assert correlation_index(4 - 1, 2 - 1, 14) == (4 + 14 * 1) - 1
    seen = {correlation_index(p, q, 14) for p in range(14) for q in range(14)}
    assert seen == set(range(196))
    for k in range(196):
        assert correlation_index(*correlation_position(k, 14), 14) == k


def test_swap_transposes():
    a = torch.randn(2, 6, 3, 4, dtype=torch.float64)
    b = torch.randn(2, 6, 3, 4, dtype=torch.float64)
    c, s = correlate(a, b), correlate(b, a)
    h, w = 3, 4
    for i in range(h):
        for j in range(w):
            for p in range(h):
                for q in range(w):
                    np.testing.assert_allclose(s[:, p + h * q, i, j], c[:, i + h * j, p, q], atol=1e-6)


def test_constant_fibers_do_not_produce_nan():
    a = torch.ones(1, 4, 2, 2)
    c = correlate(a, torch.randn(1, 4, 2, 2))
    assert torch.isfinite(c).all() and torch.all(c == 0)


def test_normalize_correlation_examples():
    def run(v):
        return normalize_correlation(torch.tensor(v, dtype=torch.float64).view(1, -1, 1, 1)).view(-1).numpy()

    np.testing.assert_array_equal(run([-1.0, -2.0, -0.5]), [0, 0, 0])
    np.testing.assert_allclose(run([-1.0, 0.3, -2.0]), [0, 1, 0])
    np.testing.assert_allclose(run([0.6, 0.8, -0.5]), [0.6, 0.8, 0.0], atol=1e-15)


@pytest.mark.parametrize("mode", ["pearson", "cosine"])
def test_correlate_gradients(mode):
    g = torch.Generator().manual_seed(3)
    b = torch.randn(1, 5, 3, 3, generator=g, dtype=torch.float64)
    w = torch.randn(1, 9, 3, 3, generator=g, dtype=torch.float64)
    a = torch.randn(1, 5, 3, 3, generator=g, dtype=torch.float64)
    assert gradient_check(lambda x: (correlate(x, b, mode) * w).sum(), a) < 1e-3
    assert gradient_check(lambda x: (correlate(a, x, mode) * w).sum(), b) < 1e-3


def test_normalize_correlation_gradient():
    g = torch.Generator().manual_seed(4)
    c = torch.randn(2, 9, 3, 3, generator=g, dtype=torch.float64)
    w = torch.randn(2, 9, 3, 3, generator=g, dtype=torch.float64)
    assert gradient_check(lambda x: (normalize_correlation(x) * w).sum(), c) < 1e-3


def test_head_gradient():
    torch.manual_seed(5)
    head = RegressionHead(grid=(5, 5), channels=(4, 3), kernels=(3, 2), fc_init_std=0.1).double()
    c = torch.randn(2, 25, 5, 5, dtype=torch.float64)
    w = torch.randn(2, 6, dtype=torch.float64)
    assert gradient_check(lambda x: (head(x) * w).sum(), c) < 1e-3
    fc_w = head.fc.weight.detach().clone()

    def via_weight(x):
        head.fc.weight.data.copy_(x)
        return (head(c) * w).sum()

    head.zero_grad()
    (head(c) * w).sum().backward()
    analytic = head.fc.weight.grad.clone()
    from _oracles import central_grad, rel_error

    numeric = central_grad(via_weight, fc_w)
    head.fc.weight.data.copy_(fc_w)
    assert rel_error(analytic, numeric) < 1e-3


def test_head_shapes_and_bad_kernels():
    head = RegressionHead()
    assert head.fc.in_features == 1024
    assert head.conv[0].in_channels == 196 and head.conv[0].out_channels == 128
    with pytest.raises(ConfigError):
        RegressionHead(grid=(5, 5), kernels=(7, 5))


def test_zero_head_gives_identity(model):
    m = build_model(NetworkConfig(fine_tune_last=False), seed=1)
    torch.nn.init.zeros_(m.head.fc.weight)
    torch.nn.init.zeros_(m.head.fc.bias)
    theta, _ = register(_pair(), m)
    assert theta == identity_params()


def test_small_init_near_identity(model):
    theta, timing = register(_pair(1), model)
    np.testing.assert_allclose(theta.theta, identity_params().theta, atol=1e-2)
    assert timing["total_seconds"] >= timing["network_seconds"] > 0


def test_register_is_deterministic(model):
    a, _ = register(_pair(2), model)
    b, _ = register(_pair(2), model)
    assert a.theta.tobytes() == b.theta.tobytes()


def test_feature_maps(model):
    img = prepare_network_input(GridImage(np.random.default_rng(0).random((224, 224, 1)), 1.0))
    fm = extract_features(model, img, "moving")
    ff = extract_features(model, img, "fixed")
    assert fm.shape == (14, 14, 512)
    norms = np.linalg.norm(fm, axis=2)
    assert np.all((np.abs(norms - 1) < 1e-5) | (norms < 1e-5))
    np.testing.assert_allclose(fm, ff, atol=1e-6)
    zero = prepare_network_input(GridImage(np.zeros((224, 224, 1)), 1.0))
    assert np.isfinite(extract_features(model, zero, "fixed")).all()


def test_l2norm_zero_fiber():
    f = torch.zeros(1, 3, 2, 2)
    f[0, :, 0, 0] = torch.tensor([3.0, 4.0, 0.0])
    out = feature_l2norm(f)
    np.testing.assert_allclose(out[0, :, 0, 0], [0.6, 0.8, 0.0])
    assert torch.all(out[0, :, 1, 1] == 0)


def test_trainable_parameters_respect_freeze_mode():
    ft = build_model(NetworkConfig(fine_tune_last=True))
    frozen = build_model(NetworkConfig(fine_tune_last=False))
    n_head = sum(p.numel() for p in frozen.head.parameters())
    assert sum(p.numel() for p in frozen.trainable_parameters()) == n_head
    # conv4_3 in each branch: 512*512*9 weights + 512 biases
    assert sum(p.numel() for p in ft.trainable_parameters()) == n_head + 2 * (512 * 512 * 9 + 512)
    for p in ft.fixed_extractor.frozen.parameters():
        assert not p.requires_grad


@given(st.floats(-1e3, 1e3), st.integers(0, 3))
@settings(max_examples=10, deadline=None)
def test_outputs_finite_for_finite_inputs(scale, seed):
    torch.manual_seed(seed)
    head = RegressionHead(grid=(4, 4), channels=(4, 3), kernels=(2, 2))
    head.eval()
    f = torch.randn(2, 8, 4, 4) * scale
    c = normalize_correlation(correlate(f, torch.randn(2, 8, 4, 4)))
    assert torch.isfinite(head(c)).all()


def test_checkpoint_round_trip(tmp_path, model):
    path = save_checkpoint(tmp_path / "m.pt", model, {"epoch": 3})
    loaded, meta = load_checkpoint(path, NetworkConfig(fine_tune_last=True))
    assert meta == {"epoch": 3}
    a, _ = register(_pair(3), model)
    b, _ = register(_pair(3), loaded)
    assert a == b
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, NetworkConfig(fine_tune_last=False))
    with pytest.raises(ConfigError):
        load_checkpoint(path, NetworkConfig(alpha=0.2))


def test_network_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(backbone="alexnet")
    with pytest.raises(ConfigError):
        NetworkConfig(correlation="dot")
    assert NetworkConfig().alpha == 0.1 and NetworkConfig().fine_tune_last is True


def test_latency_under_one_second(model):
    pair = _pair(4, shape=(224, 224))
    register(pair, model)  # warm-up
    _, timing = register(pair, model)
    assert timing["total_seconds"] < 1.0
