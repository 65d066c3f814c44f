import math

import mpmath
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pgps.stats import StatsError, betainc, paired_one_sided_ttest, t_sf

from reference import oracle_sf

VECTORS = [
    ([0.1, -0.05, 0.2, 0.05, 0.1], [0.0] * 5),
    ([0.89, 0.91, 0.88, 0.90, 0.93], [0.88, 0.90, 0.89, 0.87, 0.91]),
    ([0.74, 0.75, 0.73], [0.741, 0.742, 0.748]),
    ([1.0, 2.0], [0.5, 2.25]),
    ([0.6, 0.7, 0.65, 0.72, 0.69, 0.71, 0.64, 0.66], [0.61, 0.69, 0.6, 0.7, 0.7, 0.68, 0.6, 0.62]),
    ([3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0], [2.7, 1.8, 2.8, 1.8, 2.8, 4.5, 9.0, 4.5, 2.3, 5.3]),
    ([0.0, 0.0, 0.0, 1e-3], [0.0, 0.0, 0.0, 0.0]),
    ([10.0, 11.0, 12.0, 13.0, 15.0, 10.5], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
    ([0.45, 0.49, 0.5, 0.47], [0.5, 0.5, 0.52, 0.51]),
    ([0.2 * i for i in range(30)], [0.2 * i + 0.01 * ((-1) ** i) + 0.004 for i in range(30)]),
    ([0.93, 0.95], [0.95, 0.93]),
    ([0.5, 0.51, 0.52, 0.53, 0.54], [0.5, 0.5, 0.5, 0.5, 0.5]),
]


@pytest.mark.parametrize("a, b", VECTORS)
def test_pvalue_matches_quadrature_oracle(a, b):
    res = paired_one_sided_ttest(a, b)
    d = [x - y for x, y in zip(a, b)]
    n = len(d)
    mean = sum(d) / n
    sd = math.sqrt(sum((x - mean) ** 2 for x in d) / (n - 1))
    assert res.statistic == pytest.approx(mean / (sd / math.sqrt(n)), rel=1e-12)
    assert abs(res.pvalue - oracle_sf(res.statistic, n - 1)) < 1e-6
    assert 0 < res.pvalue < 1 and res.df == n - 1


def test_pvalue_high_accuracy():
    for t, df in [(0.3, 1), (2.5, 4), (-1.7, 9), (6.0, 3), (0.01, 200), (12.0, 2)]:
        assert abs(t_sf(t, df) - oracle_sf(t, df)) < 1e-10


def test_equal_samples():
    res = paired_one_sided_ttest([0.7, 0.8, 0.9], [0.7, 0.8, 0.9])
    assert res.statistic == 0 and res.pvalue == 0.5 and res.degenerate


def test_constant_positive_difference():
    res = paired_one_sided_ttest([2, 2, 2, 2], [1, 1, 1, 1])
    assert res.degenerate and res.pvalue < 1e-12 and res.statistic == math.inf
    res = paired_one_sided_ttest([1, 1, 1], [2, 2, 2])
    assert res.degenerate and res.pvalue == 1.0


def test_errors():
    with pytest.raises(StatsError):
        paired_one_sided_ttest([1.0], [2.0])
    with pytest.raises(StatsError):
        paired_one_sided_ttest([1.0, 2.0], [2.0])


@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=15).flatmap(
        lambda a: st.tuples(st.just(a), st.lists(st.floats(-10, 10), min_size=len(a), max_size=len(a)))
    )
)
def test_antisymmetry(ab):
    a, b = ab
    fwd, back = paired_one_sided_ttest(a, b), paired_one_sided_ttest(b, a)
    assert fwd.pvalue + back.pvalue == pytest.approx(1.0, abs=1e-12)


def test_betainc_identities():
    assert betainc(1, 1, 0.3) == pytest.approx(0.3, abs=1e-15)
    assert betainc(2.5, 0.5, 0.0) == 0.0 and betainc(2.5, 0.5, 1.0) == 1.0
    for a, b, x in [(0.5, 0.5, 0.2), (3, 7, 0.4), (10, 0.5, 0.95)]:
        assert betainc(a, b, x) + betainc(b, a, 1 - x) == pytest.approx(1.0, abs=1e-14)
        assert betainc(a, b, x) == pytest.approx(float(mpmath.betainc(a, b, 0, x, regularized=True)), abs=1e-13)
