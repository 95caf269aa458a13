import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alphadre.synthdata import (
    GaussianSpec,
    SampleSet,
    closed_form_alpha_div,
    gaussian_ratio_moment,
    make_rng,
    sample_mvn,
    standard_normal,
    true_energy_gaussian,
    true_ratio_gaussian,
)

E1 = np.array([1.0, 0.0])
ZERO = np.zeros(2)


def test_streams_are_independent_and_reproducible():
    a = make_rng(3, 0).random(5)
    assert np.array_equal(a, make_rng(3, 0).random(5))
    assert not np.array_equal(a, make_rng(3, 1).random(5))


def test_standard_normal_moments():
    z = standard_normal(make_rng(0), 200_001)
    assert z.shape == (200_001,)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


def test_equicorrelated_moments():
    s = sample_mvn(GaussianSpec.equicorrelated(5, 0.8), 100_000, seed=1)
    assert np.all(np.abs(s.data.mean(axis=0)) < 0.02)
    corr = np.corrcoef(s.data.T)
    off = corr[~np.eye(5, dtype=bool)]
    assert np.all(np.abs(off - 0.8) < 0.02)


def test_identity_covariance_off_diagonals():
    s = sample_mvn(GaussianSpec.identity(np.zeros(10)), 100_000, seed=2)
    cov = np.cov(s.data.T)
    assert np.all(np.abs(cov[~np.eye(10, dtype=bool)]) < 0.02)


def test_single_draw_is_reproducible():
    spec = GaussianSpec.identity([1.0, -2.0])
    a = sample_mvn(spec, 1, seed=9).data
    assert a.shape == (1, 2)
    assert np.array_equal(a, sample_mvn(spec, 1, seed=9).data)


def test_non_pd_covariance_rejected():
    spec = GaussianSpec(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        sample_mvn(spec, 10, seed=0)


def test_asymmetric_covariance_rejected():
    with pytest.raises(ValueError):
        GaussianSpec(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_sample_count_must_be_positive():
    with pytest.raises(ValueError):
        sample_mvn(GaussianSpec.identity(ZERO), 0, seed=0)


def test_spec_round_trip():
    spec = GaussianSpec.equicorrelated(3, 0.5, mean=[1.0, 2.0, 3.0])
    back = GaussianSpec.from_dict(spec.to_dict())
    assert np.array_equal(back.mean, spec.mean)
    assert np.array_equal(back.covariance, spec.covariance)


def test_sample_set_csv_round_trip():
    s = sample_mvn(GaussianSpec.identity(np.zeros(3)), 7, seed=4)
    text = s.to_csv()
    assert text.splitlines()[0] == "x1,x2,x3"
    back = SampleSet.from_csv(text)
    assert np.array_equal(back.data, s.data)


@pytest.mark.parametrize("text", ["", "x1,x2\n", "x1,x2\n1.0,nan\n", "x1,x2\n1.0\n"])
def test_bad_csv_rejected(text):
    with pytest.raises(ValueError):
        SampleSet.from_csv(text)


def test_ratio_identical_distributions():
    x = make_rng(0).normal(size=(20, 2))
    assert np.allclose(true_ratio_gaussian(ZERO, ZERO, x), 1.0)
    assert np.allclose(true_energy_gaussian(ZERO, ZERO, x), 0.0)


def test_ratio_hand_values():
    assert true_ratio_gaussian(ZERO, E1, ZERO) == pytest.approx(np.exp(-0.5), abs=1e-12)
    assert true_ratio_gaussian(ZERO, E1, E1) == pytest.approx(np.exp(0.5), abs=1e-12)
    assert true_energy_gaussian(ZERO, E1, ZERO) == pytest.approx(0.5)


def test_ratio_matches_density_quotient():
    # independent oracle: quotient of the two normal densities
    from scipy.stats import multivariate_normal

    mu_q = np.array([0.3, -1.2])
    x = make_rng(5).normal(size=(50, 2))
    expected = multivariate_normal(mu_q).pdf(x) / multivariate_normal(ZERO).pdf(x)
    assert np.allclose(true_ratio_gaussian(ZERO, mu_q, x), expected, rtol=1e-10)


def test_closed_form_divergence_values():
    assert closed_form_alpha_div(ZERO, ZERO, 0.5) == 0.0
    d = closed_form_alpha_div(ZERO, E1, 0.5)
    assert d == pytest.approx((np.exp(-0.125) - 1) / -0.25, abs=1e-12)
    assert d == pytest.approx(0.47001, abs=1e-5)
    assert d < 4.0


def test_closed_form_divergence_matches_monte_carlo():
    x = sample_mvn(GaussianSpec.identity(ZERO), 1_000_000, seed=11).data
    r = true_ratio_gaussian(ZERO, E1, x)
    a = 0.5
    mc = np.mean((r ** a - a * r - (1 - a)) / (a * (a - 1)))
    assert mc == pytest.approx(closed_form_alpha_div(ZERO, E1, a), abs=5e-3)


def test_oracle_self_consistency():
    n = 100_000
    xp = sample_mvn(GaussianSpec.identity(ZERO), n, seed=1).data
    xq = sample_mvn(GaussianSpec.identity(E1), n, seed=2).data
    r = true_ratio_gaussian(ZERO, E1, xp)
    assert abs(r.mean() - 1) < 3 * r.std() / np.sqrt(n)
    inv = 1.0 / true_ratio_gaussian(ZERO, E1, xq)
    assert abs(inv.mean() - 1) < 3 * inv.std() / np.sqrt(n)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 4.0), st.floats(-2.0, 3.0))
def test_ratio_moment_identity(delta_sq, s):
    assert gaussian_ratio_moment(delta_sq, s) == pytest.approx(np.exp(s * (s - 1) * delta_sq / 2))


@settings(max_examples=40, deadline=None)
@given(st.floats(-3.0, 3.0).filter(lambda a: abs(a) > 1e-3 and abs(a - 1) > 1e-3), st.floats(0.0, 2.0))
def test_closed_form_divergence_nonnegative(alpha, shift):
    d = closed_form_alpha_div(ZERO, np.array([shift, 0.0]), alpha)
    assert d >= 0
    if 0 < alpha < 1:
        assert d <= 1 / (alpha * (1 - alpha))
