import math

import pytest
from hypothesis import given
from hypothesis import strategies as st
from welch_oracle import WELCH_CASES

from concept_probe.stats import betainc, student_t_two_sided, welch_t_test


def test_identical_samples():
    assert welch_t_test([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)


@pytest.mark.parametrize("a, b, t_ref, p_ref", WELCH_CASES)
def test_matches_reference(a, b, t_ref, p_ref):
    t, p = welch_t_test(a, b)
    assert t == pytest.approx(t_ref, abs=1e-9)
    assert abs(p - p_ref) < 1e-6


def test_extreme_separation():
    _, p = welch_t_test([0, 0, 0.001], [10, 10, 10.001])
    assert p < 1e-6


def test_constant_samples():
    assert welch_t_test([0.5, 0.5], [0.5, 0.5]) == (0.0, 1.0)
    t, p = welch_t_test([1.0, 1.0, 1.0], [0.0, 0.0])
    assert p == 0.0 and t == math.inf


def test_constant_against_variable():
    t, p = welch_t_test([1.0] * 10, [0, 0, 1, 0, 0, 1, 1, 0, 1, 0])
    # one-sample t with 9 dof: t = 0.6 / sqrt(0.2667 / 10)
    assert t == pytest.approx(0.6 / math.sqrt(0.26666666666666666 / 10))
    assert 0 < p < 0.05


def test_too_small():
    with pytest.raises(ValueError):
        welch_t_test([1.0], [1.0, 2.0])


def test_betainc_known_values():
    assert betainc(1.0, 1.0, 0.3) == pytest.approx(0.3, abs=1e-14)
    assert betainc(2.0, 3.0, 0.4) == pytest.approx(0.5248, abs=1e-12)  # 1 - sum_{j<2} C(4,j) .4^j .6^(4-j)
    assert betainc(0.5, 0.5, 0.5) == pytest.approx(0.5, abs=1e-14)


def test_t_tail_one_dof_is_cauchy():
    for t in (0.3, 1.0, 4.0):
        assert student_t_two_sided(t, 1.0) == pytest.approx(1 - 2 * math.atan(t) / math.pi, abs=1e-12)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=12), st.lists(st.floats(-100, 100), min_size=2, max_size=12))
def test_p_in_unit_interval_and_symmetric(a, b):
    t1, p1 = welch_t_test(a, b)
    t2, p2 = welch_t_test(b, a)
    assert 0.0 <= p1 <= 1.0
    assert p1 == pytest.approx(p2)
    assert t1 == pytest.approx(-t2) or (math.isinf(t1) and t1 == -t2)
