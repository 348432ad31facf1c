from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from corrreg.core import (
    AffineParams,
    BinaryMask,
    GridImage,
    Modality,
    anchor_params,
    apply_to_points,
    compose,
    identity_params,
    invert,
    norm_to_pixel,
    pixel_to_norm,
    resample,
    rotation_params,
    scale_params,
    translation_params,
    warp_image,
    warp_mask,
)
from corrreg.errors import SingularTransform

finite = st.floats(-3, 3, allow_nan=False)


@st.composite
def well_conditioned(draw):
    ang = draw(st.floats(-np.pi, np.pi))
    sx, sy = draw(st.floats(0.5, 2.0)), draw(st.floats(0.5, 2.0))
    sh = draw(st.floats(-0.5, 0.5))
    tx, ty = draw(finite), draw(finite)
    c, s = np.cos(ang), np.sin(ang)
    a = np.array([[c, -s], [s, c]]) @ np.diag([sx, sy]) @ np.array([[1, sh], [0, 1]])
    return AffineParams([a[0, 0], a[0, 1], tx, a[1, 0], a[1, 1], ty])


def homogeneous(t: AffineParams) -> np.ndarray:
    a = t.theta
    return np.array([[a[0], a[1], a[2]], [a[3], a[4], a[5]], [0.0, 0.0, 1.0]])


def test_identity_examples():
    t = identity_params()
    np.testing.assert_array_equal(t.theta, [1, 0, 0, 0, 1, 0])
    np.testing.assert_array_equal(apply_to_points(t, [[0.3, -0.5]]), [[0.3, -0.5]])
    assert t.det() == 1.0


def test_anchor_examples():
    assert anchor_params(np.zeros(6)) == identity_params()
    np.testing.assert_allclose(anchor_params(np.ones(6), 0.1).theta, [1.1, 0.1, 0.1, 0.1, 1.1, 0.1], atol=1e-15)
    with pytest.raises(ValueError):
        anchor_params([np.nan, 0, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        anchor_params(np.zeros(5))


def test_affine_params_rejects_non_finite():
    with pytest.raises(ValueError):
        AffineParams([1, 0, np.inf, 0, 1, 0])


def test_compose_examples():
    t = AffineParams([1.05, 0.02, 0.1, -0.03, 0.98, -0.2])
    assert compose(identity_params(), t) == t
    np.testing.assert_allclose(compose(translation_params(0.2), translation_params(0.3)).theta,
                               translation_params(0.5).theta, atol=1e-15)
    np.testing.assert_allclose(compose(t, invert(t)).theta, identity_params().theta, atol=1e-10)
    oracle = np.linalg.inv(homogeneous(t))
    np.testing.assert_allclose(homogeneous(invert(t)), oracle, atol=1e-12)


def test_invert_examples():
    assert invert(identity_params()) == identity_params()
    np.testing.assert_allclose(invert(scale_params(2.0)).theta, scale_params(0.5).theta)
    with pytest.raises(SingularTransform):
        invert(AffineParams([1, 2, 0, 2, 4, 0]))
    with pytest.raises(ValueError):  # SingularTransform is also a ValueError
        invert(AffineParams([1e-4, 0, 0, 0, 1e-4, 0]))


def test_apply_examples():
    np.testing.assert_allclose(apply_to_points(translation_params(0.5), [[0, 0]]), [[0.5, 0]])
    np.testing.assert_allclose(apply_to_points(rotation_params(90), [[1, 0]]), [[0, 1]], atol=1e-12)


def test_normalization_examples():
    np.testing.assert_allclose(pixel_to_norm([1, 1], (3, 3)), [0, 0])
    np.testing.assert_allclose(pixel_to_norm([0, 0], (17, 31)), [-1, -1])
    np.testing.assert_allclose(pixel_to_norm([111.5, 111.5], (224, 224)), [2 * 111.5 / 223 - 1] * 2)
    np.testing.assert_allclose(pixel_to_norm([111.5, 111.5], (224, 224)), [0, 0], atol=1e-15)
    with pytest.raises(ValueError):
        pixel_to_norm([0, 0], (1, 5))


@given(well_conditioned(), st.lists(st.tuples(finite, finite), min_size=1, max_size=8))
@settings(max_examples=200, deadline=None)
def test_round_trips(t, pts):
    pts = np.array(pts)
    back = apply_to_points(invert(t), apply_to_points(t, pts))
    np.testing.assert_allclose(back, pts, atol=1e-9)
    np.testing.assert_allclose(compose(t, invert(t)).theta, identity_params().theta, atol=1e-9)
    np.testing.assert_allclose(invert(invert(t)).theta, t.theta, atol=1e-9)


@given(well_conditioned(), well_conditioned(), st.tuples(finite, finite))
@settings(max_examples=100, deadline=None)
def test_compose_matches_sequential_application(t1, t2, p):
    direct = apply_to_points(compose(t1, t2), [p])
    seq = apply_to_points(t1, apply_to_points(t2, [p]))
    np.testing.assert_allclose(direct, seq, atol=1e-9)
    np.testing.assert_allclose(homogeneous(compose(t1, t2)), homogeneous(t1) @ homogeneous(t2), atol=1e-12)


@given(st.integers(2, 300), st.integers(2, 300), st.floats(0, 1), st.floats(0, 1))
def test_pixel_norm_round_trip(h, w, fx, fy):
    p = np.array([fx * (w - 1), fy * (h - 1)])
    np.testing.assert_allclose(norm_to_pixel(pixel_to_norm(p, (h, w)), (h, w)), p, atol=1e-9)


def test_identity_warp_bit_exact(rng):
    px = rng.random((37, 29, 3))
    img = GridImage(px, 0.5, Modality.HISTOLOGY)
    out = warp_image(img, identity_params(), interp="nearest")
    np.testing.assert_array_equal(out.pixels, px)
    out = warp_image(img, identity_params(), interp="bilinear")
    np.testing.assert_allclose(out.pixels, px, atol=1e-12)


def test_single_pixel_translation_nearest():
    px = np.zeros((101, 101))
    px[10, 10] = 1.0
    shift = translation_params(*pixel_to_norm([5, 3], (101, 101)) + 1.0)
    out = resample(px, shift, (101, 101), "nearest")
    assert out[7, 5] == 1.0 and out.sum() == 1.0


@given(well_conditioned())
@settings(max_examples=30, deadline=None)
def test_constant_image_stays_constant(t):
    img = GridImage(np.full((20, 24, 1), 0.37), 1.0)
    shrunk = compose(t, scale_params(0.01))  # keeps every sample well inside the grid
    shrunk = AffineParams(np.r_[shrunk.theta[:2], 0.0, shrunk.theta[3:5], 0.0])
    np.testing.assert_allclose(warp_image(img, shrunk).pixels, 0.37, atol=1e-12)


def test_warp_composition_on_blurred_image(rng):
    px = ndimage.gaussian_filter(rng.random((96, 96)), 3)
    px = (px - px.min()) / (px.max() - px.min())
    img = GridImage(px[..., None], 1.0)
    t1 = AffineParams([0.97, 0.05, 0.03, -0.04, 1.02, -0.05])
    t2 = compose(rotation_params(4), translation_params(0.02, 0.04))
    two_step = warp_image(warp_image(img, t2), t1)
    one_step = warp_image(img, compose(t2, t1))
    # compare away from the zero-padded border
    inner = (slice(12, -12), slice(12, -12))
    assert np.abs(two_step.pixels[inner] - one_step.pixels[inner]).mean() < 0.02


def test_sampling_matches_torch_grid_sample(rng):
    torch = pytest.importorskip("torch")
    import torch.nn.functional as F

    px = rng.random((23, 31, 2))
    t = AffineParams([0.9, 0.1, 0.05, -0.2, 1.1, -0.1])
    ours = resample(px, t, (17, 19), "bilinear")
    theta = torch.tensor(t.theta.reshape(1, 2, 3))
    grid = F.affine_grid(theta, (1, 2, 17, 19), align_corners=True)
    src = torch.tensor(px).permute(2, 0, 1)[None]
    ref = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    np.testing.assert_allclose(ours, ref[0].permute(1, 2, 0).numpy(), atol=1e-10)


def test_warp_mask_stays_binary(rng):
    m = BinaryMask((rng.random((30, 30)) > 0.5).astype(np.uint8), 1.0)
    out = warp_mask(m, rotation_params(13), (25, 40))
    assert out.shape == (25, 40)
    assert set(np.unique(out.pixels)) <= {0, 1}


def test_grid_image_validation():
    with pytest.raises(ValueError):
        GridImage(np.zeros((4, 4, 2)), 1.0)
    with pytest.raises(ValueError):
        GridImage(np.full((4, 4, 1), 1.5), 1.0)
    with pytest.raises(ValueError):
        GridImage(np.zeros((4, 4, 1)), 0.0)
