import numpy as np
import pytest

from conftest import make_bundle
from errors import ClosedFormInapplicableError
from analysis.generator import (HFunction, f_entropic_closed_form, f_generator, f_on_slice, g_generator,
                                h_of_t, rho, robust_generator)
from market.constraints import Box, ConstraintSet
from market.model import ProblemWeights
from market.penalty import PenaltySpec
from market.piecewise import PiecewiseConstant

DELTA_PROFILES = [
    PiecewiseConstant.constant(0.0),
    PiecewiseConstant.constant(0.07),
    PiecewiseConstant([0.3], [0.02, 0.1]),
    PiecewiseConstant([0.3, 0.55, 0.8], [0.0, 0.2, 0.05, 0.12]),
    PiecewiseConstant([0.5], [0.3, 0.0]),
]


def test_h_constant_discount_closed_form():
    weights = ProblemWeights.constant(0.5, 2.0, 1.0, 0.05, 1.0, 1.0)
    decay = np.exp(-0.05)
    expected = decay + (0.5 / (2.0 * 0.05)) * (1.0 - decay)
    assert h_of_t(weights, 0.0) == pytest.approx(expected, rel=1e-13)
    assert h_of_t(weights, 1.0) == 1.0


@pytest.mark.parametrize("delta", DELTA_PROFILES)
def test_h_solves_the_cauchy_problem(delta):
    weights = ProblemWeights(0.4, 1.5, 1.0, delta, 1.0, 1.0)
    h = HFunction(weights)
    mids = (np.arange(1000) + 0.5) / 1000
    eps = 1e-5
    derivative = (h(mids + eps) - h(mids - eps)) / (2 * eps)
    residual = weights.alpha_bar * derivative - (weights.alpha_bar * delta.at(mids) * h(mids) - weights.alpha)
    assert np.max(np.abs(residual)) <= 1e-6


def test_h_is_defined_on_the_horizon_only():
    h = HFunction(ProblemWeights.constant(0.0, 1.0, 1.0, 0.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        h(1.5)


def test_rho():
    weights = ProblemWeights.constant(0.5, 1.0, 1.0, 0.0, 1.0, 1.0)
    assert rho(weights, 0.0) == pytest.approx(0.5 / 1.5)
    assert rho(ProblemWeights.constant(0.0, 1.0, 1.0, 0.0, 1.0, 1.0), 0.3) == 0.0


def test_g_for_the_entropic_penalty():
    bundle = make_bundle(beta=2.0)
    assert g_generator(bundle, 0.0, [1.0]) == pytest.approx(0.25)
    discounted = make_bundle(delta=0.05)
    D = np.exp(-0.025)
    assert g_generator(discounted, 0.5, [1.0]) == pytest.approx(1.0 / (2.0 * D), rel=1e-14)


def test_g_is_even_and_vectorized():
    penalty = PenaltySpec("tabulated", 1, kappa1=0.25, radii=np.array([0.0, 1.0, 2.0]),
                          values=np.array([0.0, 0.4, 1.5]))
    bundle = make_bundle(penalty=penalty)
    zs = np.array([[0.3], [-0.3], [1.2], [-1.2]])
    values = g_generator(bundle, 0.2, zs)
    assert values.shape == (4,)
    assert values[0] == pytest.approx(values[1]) and values[2] == pytest.approx(values[3])


def test_g_with_norm_penalty_is_infinite_outside_the_budget():
    bundle = make_bundle(penalty=PenaltySpec("norm", 1))
    assert g_generator(bundle, 0.0, [0.5]) == 0.0
    assert g_generator(bundle, 0.0, [1.5]) == np.inf


def test_robust_generator_flips_sign(anchor_bundle):
    concave = robust_generator(anchor_bundle, "concave")
    convex = robust_generator(anchor_bundle, "convex")
    assert concave(0.0, [0.4]) == pytest.approx(-convex(0.0, [0.4]))
    with pytest.raises(ValueError):
        robust_generator(anchor_bundle, "sideways")


def test_f_at_the_anchor(anchor_bundle, literal_bundle):
    value, pi, c = f_generator(anchor_bundle, 0.3, [0.0])
    assert value == pytest.approx(0.01, abs=1e-15)
    assert pi == pytest.approx([0.1])
    assert c == 0.0
    value, pi, _ = f_generator(literal_bundle, 0.3, [0.0])
    assert value == pytest.approx(0.02, abs=1e-15)
    assert pi == pytest.approx([-0.2])


def test_slice_evaluation_matches_pointwise(box_bundle):
    zs = np.random.default_rng(2).normal(scale=0.5, size=(40, 1))
    values, pis, c = f_on_slice(box_bundle, (40, 7), 0.4, zs)
    for z, value, pi in zip(zs, values, pis):
        expected, expected_pi, _ = f_generator(box_bundle, 0.4, z)
        assert value == pytest.approx(expected, abs=1e-13)
        assert pi == pytest.approx(expected_pi, abs=1e-12)
    assert f_on_slice(box_bundle, (40, 7), 0.4, zs)[0] is values
    assert len(box_bundle.cache) == 1


def test_slice_evaluation_does_not_depend_on_workers():
    penalty = PenaltySpec("quadratic", 1, weight=1.0, domain_radius=2.0)
    zs = np.random.default_rng(4).normal(size=(12, 1))
    serial = f_on_slice(make_bundle(penalty=penalty), (12, 0), 0.1, zs, workers=1)
    threaded = f_on_slice(make_bundle(penalty=penalty), (12, 0), 0.1, zs, workers=4)
    assert np.array_equal(serial[0], threaded[0])
    assert np.array_equal(serial[1], threaded[1])


@pytest.mark.parametrize("name", ["anchor_bundle", "box_bundle", "consumption_bundle"])
def test_calibrated_closed_form_matches_first_principles(name, request):
    bundle = request.getfixturevalue(name)
    rng = np.random.default_rng(8)
    for t, z in zip(rng.uniform(0.0, 1.0, 100), rng.normal(size=(100, 1))):
        assert f_entropic_closed_form(bundle, t, z) == pytest.approx(f_generator(bundle, t, z)[0], abs=1e-10)


def test_closed_form_needs_the_entropic_penalty():
    bundle = make_bundle(penalty=PenaltySpec("quadratic", 1, weight=2.0))
    with pytest.raises(ClosedFormInapplicableError):
        f_entropic_closed_form(bundle, 0.0, [0.0])


def test_closed_form_needs_interior_consumption():
    bundle = make_bundle(alpha=0.5, consumption=ConstraintSet((Box(0.01, 0.1),), 1))
    with pytest.raises(ClosedFormInapplicableError, match="outside the consumption set"):
        f_entropic_closed_form(bundle, 0.0, [0.0])


GROWTH_PENALTIES = [
    PenaltySpec("quadratic", 1, weight=2.0, kappa1=1.0),
    PenaltySpec("tabulated", 1, kappa1=0.25, radii=np.array([0.0, 1.0, 2.0]), values=np.array([0.0, 0.4, 1.5])),
]


@pytest.mark.parametrize("penalty", GROWTH_PENALTIES, ids=["quadratic", "tabulated"])
def test_g_is_convex_with_quadratic_growth(penalty):
    bundle = make_bundle(penalty=penalty, delta=0.05)
    rng = np.random.default_rng(11)
    for t, z1, z2 in zip(rng.uniform(0.0, 1.0, 50), rng.normal(scale=2.0, size=(50, 1)),
                         rng.normal(scale=2.0, size=(50, 1))):
        g1, g2 = g_generator(bundle, t, z1), g_generator(bundle, t, z2)
        assert g_generator(bundle, t, 0.5 * (z1 + z2)) <= 0.5 * (g1 + g2) + 1e-7
        scale = bundle.weights.beta * bundle.discount(t)
        bound = scale * (float(z1 @ z1) / scale ** 2 / (4.0 * penalty.kappa1) + penalty.kappa2)
        assert g1 <= bound + 1e-9
    assert g_generator(bundle, 0.3, [0.0]) == pytest.approx(0.0, abs=1e-12)


def test_f_ignores_a_duplicate_piece(box_bundle):
    doubled = make_bundle(portfolio=ConstraintSet((Box(0.0, 0.1), Box(0.0, 0.1)), 1))
    rng = np.random.default_rng(12)
    for t, z in zip(rng.uniform(0.0, 1.0, 30), rng.normal(size=(30, 1))):
        value, pi, _ = f_generator(box_bundle, t, z)
        doubled_value, doubled_pi, _ = f_generator(doubled, t, z)
        assert doubled_value == value
        assert np.array_equal(doubled_pi, pi)


def test_printed_closed_form_disagrees_with_both_generators(anchor_bundle, literal_bundle):
    assert f_generator(anchor_bundle, 0.0, [0.0])[0] == pytest.approx(0.01, abs=1e-15)
    assert f_generator(literal_bundle, 0.0, [0.0])[0] == pytest.approx(0.02, abs=1e-15)
    assert f_entropic_closed_form(literal_bundle, 0.0, [0.0]) == pytest.approx(-0.01, abs=1e-15)
    assert f_entropic_closed_form(anchor_bundle, 0.0, [0.0]) == pytest.approx(0.01, abs=1e-15)
