from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from latent_search.alignment import (
    AffineTransform,
    AlignmentError,
    SimilarityTransform,
    apply_transform,
    estimate_transform,
    patch_frame,
)
from latent_search.template import Kind, Minutia


def homogeneous(s, phi, tx, ty, pts):
    """Reference: explicit 3x3 matrix product."""
    m = np.array(
        [[s * math.cos(phi), -s * math.sin(phi), tx], [s * math.sin(phi), s * math.cos(phi), ty], [0, 0, 1]]
    )
    h = np.column_stack([pts, np.ones(len(pts))])
    return (m @ h.T).T[:, :2]


def test_identity_pairs():
    p = np.array([[0.0, 0.0], [10.0, 3.0], [4.0, 8.0]])
    t = estimate_transform((p, p))
    assert t.scale == pytest.approx(1, abs=1e-12)
    assert t.rotation == pytest.approx(0, abs=1e-12)
    assert (t.tx, t.ty) == pytest.approx((0, 0), abs=1e-12)


def test_pure_translation():
    p = np.array([[0.0, 0.0], [10.0, 3.0], [4.0, 8.0]])
    t = estimate_transform([(a, a + (10, -5)) for a in p])
    assert (t.scale, t.rotation, t.tx, t.ty) == pytest.approx((1, 0, 10, -5), abs=1e-12)


def test_scaled_rotation():
    p = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    g = homogeneous(2, math.pi / 2, 5, 5, p)
    t = estimate_transform((p, g))
    assert abs(t.scale - 2) < 1e-9 and abs(t.rotation - math.pi / 2) < 1e-9
    assert abs(t.tx - 5) < 1e-9 and abs(t.ty - 5) < 1e-9


def test_two_pairs_exact():
    p = np.array([[1.0, 2.0], [5.0, -1.0]])
    g = homogeneous(0.7, -1.1, 3, 4, p)
    t = estimate_transform((p, g))
    assert np.allclose(t.apply(p), g, atol=1e-12)


def test_too_few_pairs():
    with pytest.raises(AlignmentError):
        estimate_transform((np.zeros((1, 2)), np.zeros((1, 2))))
    with pytest.raises(AlignmentError):
        estimate_transform([])


def test_coincident_probe_points():
    p = np.array([[3.0, 3.0]] * 4)
    with pytest.raises(AlignmentError):
        estimate_transform((p, np.random.default_rng(0).normal(size=(4, 2))))


def test_apply_identity_and_half_turn():
    pts = np.array([[1.0, 0.0], [3.0, -2.0]])
    assert np.array_equal(apply_transform(SimilarityTransform.identity(), pts), pts)
    out = SimilarityTransform(1.0, math.pi, 0, 0).apply([[1.0, 0.0]])
    assert np.allclose(out, [[-1.0, 0.0]], atol=1e-12)


def test_apply_matches_matrix_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s, phi, tx, ty = rng.uniform(0.2, 3), rng.uniform(-4, 4), rng.normal(0, 100), rng.normal(0, 100)
        pts = rng.uniform(-500, 500, (20, 2))
        T = SimilarityTransform(s, phi, tx, ty)
        assert np.allclose(T.apply(pts), homogeneous(s, phi, tx, ty, pts), rtol=0, atol=1e-9)


def test_invalid_transform_parameters():
    with pytest.raises(ValueError):
        SimilarityTransform(0.0)
    with pytest.raises(ValueError):
        SimilarityTransform(1.0, float("nan"))


def test_compose():
    a = SimilarityTransform(1.5, 0.3, 2, -1)
    b = SimilarityTransform(0.5, -1.2, 7, 9)
    pts = np.random.default_rng(2).normal(size=(5, 2))
    assert np.allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)


def test_trimmed_refit_drops_outlier():
    rng = np.random.default_rng(3)
    p = rng.uniform(0, 300, (10, 2))
    g = homogeneous(1, 0.4, 10, 20, p)
    g[0] += 80
    plain = estimate_transform((p, g))
    trimmed = estimate_transform((p, g), trimmed=True)
    assert abs(trimmed.rotation - 0.4) < abs(plain.rotation - 0.4)
    assert abs(trimmed.rotation - 0.4) < 1e-9


def test_affine_model():
    rng = np.random.default_rng(4)
    a = np.array([[1.1, 0.2, 5], [-0.1, 0.9, -3]])
    p = rng.normal(size=(6, 2))
    g = p @ a[:, :2].T + a[:, 2]
    t = estimate_transform((p, g), model="affine")
    assert isinstance(t, AffineTransform)
    assert np.allclose(t.a, a, atol=1e-12)
    with pytest.raises(ValueError):
        estimate_transform((p, g), model="projective")


def test_patch_frame_zero_angle():
    f = patch_frame(Minutia(100.0, 50.0, 0.0, Kind.RIDGE_ENDING))
    h = (96 - 1) / 2
    assert np.allclose(f.to_image(h, h), [100, 50])
    assert np.allclose(f.to_image(h + 1, h), [101, 50])
    assert np.allclose(f.to_image(h, h + 1), [100, 51])


def test_patch_frame_quarter_turn_corner_distance():
    f = patch_frame(Minutia(200.0, 200.0, math.pi / 2, Kind.BIFURCATION))
    d = np.hypot(*(f.to_image(0, 0) - [200, 200]))
    assert abs(d - math.sqrt(2) * 47.5) < 1e-9


def test_patch_frame_corners_match_rotation_oracle():
    f = patch_frame(Minutia(100.0, 100.0, math.pi / 4, Kind.RIDGE_ENDING))
    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    R = np.array([[c, -s], [s, c]])
    local = np.array([[-47.5, -47.5], [47.5, -47.5], [47.5, 47.5], [-47.5, 47.5]])
    assert np.allclose(f.corners(), local @ R.T + [100, 100], atol=1e-9)


def test_patch_sampling_bilinear():
    img = np.arange(200 * 200, dtype=np.float32).reshape(200, 200) % 251
    f = patch_frame(Minutia(100.0, 100.0, 0.0), size=8)
    out = f.sample(img)
    # zero rotation with a half-pixel centre: samples fall halfway between pixels
    xy = f.to_image(np.arange(8), np.zeros(8))
    assert out.shape == (8, 8)
    x0 = int(np.floor(xy[0, 0]))
    assert out[0, 0] == pytest.approx(0.25 * (img[96, x0] + img[96, x0 + 1] + img[97, x0] + img[97, x0 + 1]), abs=1e-3)


@given(st.integers(0, 2**32 - 1))
def test_noiseless_recovery(seed):
    rng = np.random.default_rng(seed)
    s, phi = rng.uniform(0.5, 2.0), rng.uniform(-math.pi + 1e-3, math.pi - 1e-3)
    tx, ty = rng.uniform(-200, 200, 2)
    p = rng.uniform(0, 512, (int(rng.integers(3, 30)), 2))
    t = estimate_transform((p, homogeneous(s, phi, tx, ty, p)))
    assert abs(t.scale - s) < 1e-6 and abs(t.rotation - phi) < 1e-6
    assert abs(t.tx - tx) < 1e-6 and abs(t.ty - ty) < 1e-6


@given(st.integers(0, 2**32 - 1))
def test_round_trip_inverse(seed):
    rng = np.random.default_rng(seed)
    T = SimilarityTransform(rng.uniform(0.2, 5), rng.uniform(-10, 10), *rng.uniform(-1000, 1000, 2))
    p = rng.uniform(-600, 600, (10, 2))
    assert np.abs(T.inverse().apply(T.apply(p)) - p).max() < 1e-9


@given(st.integers(0, 2**32 - 1))
def test_shift_equivariance(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 500, (8, 2))
    g = rng.uniform(0, 500, (8, 2))
    v = rng.uniform(-100, 100, 2)
    a = estimate_transform((p, g))
    b = estimate_transform((p + v, g + v))
    assert abs(a.scale - b.scale) < 1e-9
    assert abs(math.remainder(a.rotation - b.rotation, 2 * math.pi)) < 1e-9


def test_noise_robustness():
    good = 0
    sigma = 2.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0, 512, (12, 2))
        g = homogeneous(1.0, rng.uniform(-1, 1), *rng.uniform(-50, 50, 2), p) + rng.normal(0, sigma, (12, 2))
        t = estimate_transform((p, g))
        rms = math.sqrt(np.mean(np.sum((t.apply(p) - g) ** 2, axis=1)))
        good += rms <= 2 * sigma
    assert good >= 95
