import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from davgswt.camera import Pose
from davgswt.errors import ConfigurationError, DimensionError, IntegrityError
from davgswt.prior import ensemble_from_arrays
from davgswt.uncertainty import (
    EstimatorConfig, canonical_pair, estimate_cost, perceptual_distance, score_batch, score_view,
    sobel_gradient_scalar, w2_ensemble, w2_from_arrays,
)


def w2_naive(mu, var):
    """Direct pairwise sum of the diagonal-Gaussian squared W2 per location."""
    m = mu.shape[0]
    sig = np.sqrt(var)
    total = np.zeros(mu.shape[2:])
    for i, j in itertools.combinations(range(m), 2):
        total += ((mu[i] - mu[j]) ** 2).sum(axis=0) + ((sig[i] - sig[j]) ** 2).sum(axis=0)
    return total / (m * (m - 1) / 2)


def test_w2_matches_naive_loop(rng):
    mu = rng.normal(size=(5, 4, 16, 16))
    var = rng.uniform(0, 2, (5, 4, 16, 16))
    s, spatial = w2_from_arrays(mu, var)
    assert np.allclose(spatial, w2_naive(mu, var), atol=1e-10)
    assert s == pytest.approx(spatial.mean())


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_w2_properties(m, c, seed):
    r = np.random.default_rng(seed)
    mu = r.normal(size=(m, c, 3, 3))
    var = r.uniform(0, 1, (m, c, 3, 3))
    s, spatial = w2_from_arrays(mu, var)
    assert np.all(spatial >= -1e-12)
    # permutation invariance
    perm = r.permutation(m)
    assert w2_from_arrays(mu[perm], var[perm])[0] == pytest.approx(s, rel=1e-10, abs=1e-12)
    # identical members give zero
    assert w2_from_arrays(np.repeat(mu[:1], m, 0), np.repeat(var[:1], m, 0))[0] == pytest.approx(0.0, abs=1e-12)


def test_w2_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        w2_from_arrays(np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 2)))
    ens = ensemble_from_arrays([np.zeros((3, 2, 2))] * 2, [-np.ones((3, 2, 2))] * 2)
    with pytest.raises(IntegrityError):
        w2_ensemble(ens)


def test_perceptual_distance_basics(rng):
    a = rng.uniform(0, 1, (32, 32, 3))
    assert perceptual_distance(a, a) == 0.0
    b = np.clip(a + 0.2, 0, 1)
    assert perceptual_distance(a, b) == pytest.approx(perceptual_distance(b, a))
    assert 0 < perceptual_distance(a, b) <= 1
    with pytest.raises(DimensionError):
        perceptual_distance(a, a[:16])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1)), arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1)))
def test_perceptual_distance_is_bounded_and_symmetric(a, b):
    d = perceptual_distance(a, b)
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(perceptual_distance(b, a))


def test_sobel_scalar():
    flat = np.full((8, 8, 3), 0.3)
    assert sobel_gradient_scalar(flat) == 0.0
    ramp = np.tile(np.linspace(0, 1, 8)[None, :, None], (8, 1, 3))
    assert sobel_gradient_scalar(ramp) > 0
    with pytest.raises(DimensionError):
        sobel_gradient_scalar(np.zeros((2, 2)))


def test_canonical_pair_ignores_member_order(rng):
    means = [rng.normal(size=(3, 4, 4)) for _ in range(4)]
    var = [np.zeros((3, 4, 4))] * 4
    a = ensemble_from_arrays(means, var)
    b = ensemble_from_arrays(means[::-1], var)
    ia, ib = canonical_pair(a)
    ja, jb = canonical_pair(b)
    assert np.array_equal(a.samples[ia].mean, b.samples[ja].mean)
    assert np.array_equal(a.samples[ib].mean, b.samples[jb].mean)


def test_score_view_combines_terms(rng):
    means = [rng.uniform(0, 1, (4, 8, 8)) for _ in range(3)]
    ens = ensemble_from_arrays(means, [np.full((4, 8, 8), 0.01)] * 3)
    rep = score_view(None, ens.pose, ens, EstimatorConfig(lam=0.5))
    assert rep.score == pytest.approx(rep.w2_component + 0.5 * rep.perceptual_component)
    img = score_view(None, ens.pose, ens, EstimatorConfig(mode="image_space", lam=0.5))
    assert img.w2_component == 0.0 and img.score == pytest.approx(img.gradient_component + 0.5 * img.perceptual_component)
    with pytest.raises(ConfigurationError):
        score_view(None, Pose(0.1, 0.0, 1.0), ens, EstimatorConfig())


def test_image_space_batch_is_rescaled(rng):
    ens = [ensemble_from_arrays([rng.uniform(0, 1, (3, 8, 8)) for _ in range(2)], [np.zeros((3, 8, 8))] * 2) for _ in range(6)]
    reps = score_batch(None, [e.pose for e in ens], ens, EstimatorConfig(mode="image_space", lam=0.0))
    assert np.percentile([r.gradient_component for r in reps], 95) == pytest.approx(1.0)


def test_estimator_config_validation():
    for kw in ({"mode": "pixels"}, {"lam": -1.0}, {"sobel_padding": "zero"}, {"lpips_pair_rule": (1, 1)}):
        with pytest.raises(ConfigurationError):
            EstimatorConfig(**kw)


def test_cost_formula():
    assert estimate_cost(1, 1, 1, 1, 1) == 1
    assert estimate_cost(2, 3, 4, 5, 6) == 720
    with pytest.raises(DimensionError):
        estimate_cost(0, 5, 4, 64, 64)
