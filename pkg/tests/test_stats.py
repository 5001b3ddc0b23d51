import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, optimize
from scipy import stats as sps

from lavps.stats import betainc, t_cdf, t_ppf


def _t_ppf_by_quadrature(p, df):
    """Invert the CDF obtained by integrating the Student-t density."""
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    dens = lambda u: math.exp(logc - (df + 1) / 2 * math.log1p(u * u / df))  # noqa: E731
    cdf = lambda x: 0.5 + integrate.quad(dens, 0, x, epsabs=1e-13)[0]  # noqa: E731
    return optimize.brentq(lambda x: cdf(x) - p, 0, 50, xtol=1e-12)


@pytest.mark.parametrize("df,expected", [(3, 2.3534), (10, 1.8125)])
def test_known_quantiles(df, expected):
    q = t_ppf(0.95, df)
    assert q == pytest.approx(expected, abs=1e-3)
    assert q == pytest.approx(_t_ppf_by_quadrature(0.95, df), abs=1e-8)


def test_normal_limit():
    assert abs(t_ppf(0.95, 10**6) - 1.6449) <= 1e-3


@given(st.floats(0.51, 0.999), st.integers(1, 200))
def test_ppf_matches_scipy(p, df):
    assert t_ppf(p, df) == pytest.approx(sps.t.ppf(p, df), rel=1e-8, abs=1e-8)


@given(st.floats(-30, 30), st.floats(0.5, 500))
def test_cdf_matches_scipy(x, df):
    assert t_cdf(x, df) == pytest.approx(sps.t.cdf(x, df), abs=1e-10)


@given(st.floats(0.1, 20), st.floats(0.1, 20), st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    from scipy.special import betainc as ref

    assert betainc(a, b, x) == pytest.approx(ref(a, b, x), abs=1e-10)


@given(st.integers(1, 100))
def test_quantile_monotone_in_alpha_and_df(df):
    qs = [t_ppf(1 - a, df) for a in (0.2, 0.1, 0.05, 0.01)]
    assert all(u < v for u, v in zip(qs, qs[1:]))
    assert t_ppf(0.95, df + 1) < t_ppf(0.95, df)


def test_symmetry_and_errors():
    assert t_ppf(0.5, 4) == pytest.approx(0.0, abs=1e-10)
    assert t_ppf(0.1, 4) == pytest.approx(-t_ppf(0.9, 4), abs=1e-10)
    assert t_cdf(0.0, 7) == 0.5
    for p in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            t_ppf(p, 3)
    with pytest.raises(ValueError):
        t_ppf(0.9, 0)
    assert np.isfinite(t_ppf(0.999999, 1))
