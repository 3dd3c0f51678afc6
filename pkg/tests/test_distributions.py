import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from imtpp import diffgraph as dg
from imtpp import distributions as D

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def ln(mu, sigma):
    return D.LogNormalParams(np.float64(mu), np.float64(sigma))


def val(t):
    return float(np.asarray(t.value))


def test_lognormal_logpdf_closed_form_points():
    assert val(D.lognormal_logpdf(1.0, ln(0, 1))) == pytest.approx(-LOG_SQRT_2PI, abs=1e-12)
    assert val(D.lognormal_logpdf(math.e, ln(1, 1))) == pytest.approx(-1 - LOG_SQRT_2PI, abs=1e-12)


def test_lognormal_logpdf_matches_scipy():
    x = np.linspace(0.01, 8, 50)
    ref = stats.lognorm(s=0.7, scale=math.exp(0.3)).logpdf(x)
    np.testing.assert_allclose(D.lognormal_logpdf(x, ln(0.3, 0.7)).value, ref, rtol=1e-12)


def test_lognormal_logpdf_domain():
    with pytest.raises(dg.NumericDomainError):
        D.lognormal_logpdf(0.0, ln(0, 1))


def test_invalid_parameters():
    with pytest.raises(ValueError):
        ln(0, 0)
    with pytest.raises(ValueError):
        D.TruncatedLogNormalParams(ln(0, 1), 0.0)


def test_reparam_sample_points():
    assert val(D.lognormal_sample_reparam(ln(0.4, 2.0), 0.0)) == pytest.approx(math.exp(0.4))
    assert val(D.lognormal_sample_reparam(ln(0.0, 0.5), 2.0)) == pytest.approx(math.e)


def test_reparam_monte_carlo_mean():
    z = np.random.default_rng(0).standard_normal(10**6)
    assert D.lognormal_sample_reparam(ln(0, 0.5), z).value.mean() == pytest.approx(math.exp(0.125), abs=0.003)


def test_lognormal_mean_and_median():
    assert val(D.lognormal_mean(ln(0, 1))) == pytest.approx(math.exp(0.5))
    assert val(D.lognormal_mean(ln(0, 1e-3))) == pytest.approx(1.0, abs=1e-6)
    assert val(D.lognormal_median(ln(0.7, 3.0))) == pytest.approx(math.exp(0.7))


def test_sigma_from_raw_is_clamped():
    s = D.sigma_from_raw(np.array([-50.0, 0.0, 50.0])).value
    np.testing.assert_allclose(s, [D.SIGMA_MIN, 1.0, D.SIGMA_MAX])


def test_lognormal_kl():
    assert val(D.lognormal_kl_closed(ln(0.3, 0.8), ln(0.3, 0.8))) == pytest.approx(0.0, abs=1e-14)
    assert val(D.lognormal_kl_closed(ln(1, 1), ln(0, 1))) == pytest.approx(0.5)
    # against quadrature of q log(q/p)
    q, p = ln(0.2, 0.6), ln(-0.1, 1.3)
    f = lambda x: math.exp(val(D.lognormal_logpdf(x, q))) * (val(D.lognormal_logpdf(x, q)) - val(D.lognormal_logpdf(x, p)))
    ref = integrate.quad(f, 0, np.inf, limit=200)[0]
    assert val(D.lognormal_kl_closed(q, p)) == pytest.approx(ref, rel=1e-7)


def test_truncated_sample_endpoints():
    p = D.TruncatedLogNormalParams(ln(0, 1), 2.0)
    hi = val(D.truncated_lognormal_sample(p, 1 - 1e-15))
    assert hi < 2.0 and hi > 1.999
    far = D.TruncatedLogNormalParams(ln(0.5, 0.2), math.exp(0.5 + 12 * 0.2))
    assert val(D.truncated_lognormal_sample(far, 0.5)) == pytest.approx(math.exp(0.5), abs=1e-6)


def test_truncated_sample_exhausted_interval():
    p = D.TruncatedLogNormalParams(ln(10.0, 0.1), 1e-3)
    with pytest.raises(D.IntervalExhausted):
        D.truncated_lognormal_sample(p, 0.5)


def test_truncated_logpdf_properties():
    base = ln(0.1, 0.9)
    wide = D.TruncatedLogNormalParams(base, 1e12)
    x = np.array([0.3, 1.0, 4.0])
    np.testing.assert_allclose(D.truncated_lognormal_logpdf(x, wide).value, D.lognormal_logpdf(x, base).value,
                               atol=1e-9)
    up = 3.0
    p = D.TruncatedLogNormalParams(ln(math.log(up / 2), 1.0), up)
    assert val(D.truncated_lognormal_logpdf(up / 2, p)) > val(D.lognormal_logpdf(up / 2, p.base))
    out = D.truncated_lognormal_logpdf(np.array([-1.0, 1.0, 3.0, 5.0]), p).value
    assert np.isneginf(out[[0, 2, 3]]).all() and np.isfinite(out[1])


def test_truncated_density_integrates_to_one():
    p = D.TruncatedLogNormalParams(ln(0.4, 0.6), 1.7)
    f = lambda x: math.exp(val(D.truncated_lognormal_logpdf(x, p)))
    assert integrate.quad(f, 0, 1.7, limit=200)[0] == pytest.approx(1.0, abs=1e-6)


def test_categorical_values():
    q = D.MarkDistribution.from_probs([0.9, 0.1])
    half = D.MarkDistribution.from_probs([0.5, 0.5])
    assert val(D.categorical_kl(half, half)) == pytest.approx(0.0, abs=1e-15)
    ref = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    assert val(D.categorical_kl(q, half)) == pytest.approx(ref, rel=1e-12)
    assert val(D.categorical_kl(D.MarkDistribution(np.array([0.0, -np.inf])), half)) == pytest.approx(math.log(2))
    assert val(D.categorical_logpmf(q, 1)) == pytest.approx(math.log(0.1))


def test_categorical_kl_floor_warns(caplog):
    q = D.MarkDistribution.from_probs([0.5, 0.5])
    p = D.MarkDistribution(np.array([0.0, -1e4]))
    kl = val(D.categorical_kl(q, p))
    assert math.isfinite(kl) and "floored" in caplog.text


def test_categorical_sample_frequencies():
    dist = D.MarkDistribution.from_probs([0.2, 0.5, 0.3])
    gen = np.random.default_rng(1)
    draws = [D.categorical_sample(dist, gen) for _ in range(20000)]
    freq = np.bincount(draws, minlength=3) / 20000
    np.testing.assert_allclose(freq, [0.2, 0.5, 0.3], atol=0.015)
    batch = D.MarkDistribution(np.log(np.array([[0.2, 0.8], [0.9, 0.1]])))
    assert list(D.categorical_sample(batch, u=np.array([0.1, 0.95]))) == [0, 1]


def test_from_probs_validates():
    with pytest.raises(ValueError):
        D.MarkDistribution.from_probs([0.6, 0.6])


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 3), st.floats(0.05, 20), st.floats(1e-9, 1 - 1e-9))
def test_truncated_sample_stays_inside(mu, sigma, upper, u):
    p = D.TruncatedLogNormalParams(ln(mu, sigma), upper)
    try:
        x = val(D.truncated_lognormal_sample(p, u))
    except D.IntervalExhausted:
        return
    assert 0 < x < upper


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(0.1, 2), st.floats(0.2, 10), st.floats(0.01, 0.99))
def test_truncated_sample_inverts_cdf(mu, sigma, upper, u):
    p = D.TruncatedLogNormalParams(ln(mu, sigma), upper)
    if stats.norm.cdf((math.log(upper) - mu) / sigma) < 1e-6:
        return
    x = val(D.truncated_lognormal_sample(p, u))
    assert D.truncated_lognormal_cdf(x, mu, sigma, upper) == pytest.approx(u, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=5), st.lists(st.floats(-5, 5), min_size=2, max_size=5))
def test_categorical_kl_nonnegative(a, b):
    n = min(len(a), len(b))
    kl = val(D.categorical_kl(D.MarkDistribution(np.array(a[:n])), D.MarkDistribution(np.array(b[:n]))))
    assert kl >= -1e-12
