import numpy as np
import pytest

from market.piecewise import PiecewiseConstant


def test_values_are_right_continuous():
    step = PiecewiseConstant([0.5], [1.0, 2.0])
    assert step.at(0.49) == 1.0
    assert step.at(0.5) == 2.0
    assert np.array_equal(step.at(np.array([0.0, 0.75])), [1.0, 2.0])


def test_integral_is_exact_across_breakpoints():
    step = PiecewiseConstant([0.5], [1.0, 2.0])
    assert step.integral(0.0, 1.0) == pytest.approx(1.5, abs=1e-15)
    assert step.integral(0.25, 0.75) == pytest.approx(0.75, abs=1e-15)
    assert step.integral(1.0, 0.0) == pytest.approx(-1.5, abs=1e-15)


def test_exp_integral_matches_closed_form():
    rate = 0.3
    step = PiecewiseConstant.constant(rate)
    assert step.exp_integral(0.0, 1.0) == pytest.approx(-np.expm1(-rate) / rate, rel=1e-14)
    assert PiecewiseConstant.constant(0.0).exp_integral(0.2, 0.9) == pytest.approx(0.7, abs=1e-15)


def test_rejects_mismatched_value_count():
    with pytest.raises(ValueError, match="need 2 values"):
        PiecewiseConstant([0.5], [1.0, 2.0, 3.0])


def test_rejects_unsorted_breaks():
    with pytest.raises(ValueError, match="strictly increasing"):
        PiecewiseConstant([0.6, 0.4], [1.0, 2.0, 3.0])


def test_spec_round_trip():
    step = PiecewiseConstant.from_spec({"times": [0.5], "values": [[0.1], [0.2]]})
    again = PiecewiseConstant.from_spec(step.to_spec())
    assert np.array_equal(again.breaks, step.breaks)
    assert np.array_equal(again.values, step.values)
    assert step.value_shape == (1,)
    assert not step.is_constant
