import numpy as np
import pytest

from conftest import make_bundle
from errors import ClosedFormInapplicableError, LatticeMismatchError, StepSizeError
from analysis.bsde_engine import Lattice, extract_strategy, solve_value_bsde
from analysis.verify import (DensityScenario, GaussianFunctional, VerifySettings, calibrate_tolerance,
                             check_supermartingale, crossvalidate_closed_form, dual_objective,
                             dual_objective_monte_carlo, entropic_closed_form, perturbed_strategies,
                             robust_value_crosscheck, run_verification_suite, saddle_oracle)
from market.constraints import Box, ConstraintSet, Singleton
from market.model import StrategyProcess

FAST = VerifySettings(perturbations=10)


def test_branch_probabilities_sum_to_one():
    lattice = Lattice(10, 1.0, 2)
    scenario = DensityScenario.constant(10, [0.5, -1.0])
    probabilities = scenario.branch_probabilities(lattice, 3)
    assert probabilities.shape == (4, 4, 4)
    assert np.allclose(probabilities.sum(axis=0), 1.0)


def test_branch_reweighting_needs_small_steps():
    with pytest.raises(StepSizeError):
        DensityScenario.constant(100, [20.0]).branch_probabilities(Lattice(100, 1.0, 1), 0)


def test_dual_objective_without_investment_or_adversary(anchor_bundle):
    times = np.linspace(0.0, 1.0, 11)
    strategy = StrategyProcess.constant(times, [0.0], 0.0)
    value = dual_objective(DensityScenario.zero(10, 1), strategy, anchor_bundle.model,
                           anchor_bundle.weights, anchor_bundle.penalty)
    assert value == pytest.approx(0.0, abs=1e-15)


def test_dual_objective_closed_form(anchor_bundle):
    # pi = 0.1 against eta = -0.1: 0.1 (0.2 - 0.1) - 0.005 + 0.005
    strategy = StrategyProcess.constant(np.linspace(0.0, 1.0, 21), [0.1], 0.0)
    value = dual_objective(DensityScenario.constant(20, [-0.1]), strategy, anchor_bundle.model,
                           anchor_bundle.weights, anchor_bundle.penalty)
    assert value == pytest.approx(0.01, abs=1e-14)


def test_node_indexed_inputs_match_time_indexed(consumption_bundle):
    steps = 8
    lattice = Lattice(steps, 1.0, 1)
    pi = np.linspace(0.05, 0.2, steps)
    c = np.linspace(0.3, 0.6, steps)
    eta = np.linspace(-0.2, 0.1, steps)
    timed = StrategyProcess.time_indexed(lattice.times, pi[:, np.newaxis], c)
    noded = StrategyProcess(lattice.times,
                            tuple(np.full(lattice.slice_shape(k) + (1,), pi[k]) for k in range(steps)),
                            tuple(np.full(lattice.slice_shape(k), c[k]) for k in range(steps)))
    scenario = DensityScenario(tuple(np.array([e]) for e in eta))
    node_scenario = DensityScenario(tuple(np.full(lattice.slice_shape(k) + (1,), eta[k]) for k in range(steps)))
    args = (consumption_bundle.model, consumption_bundle.weights, consumption_bundle.penalty)
    assert dual_objective(node_scenario, noded, *args) == pytest.approx(
        dual_objective(scenario, timed, *args), abs=1e-12)


def test_monte_carlo_dual_objective_brackets_the_exact_value(anchor_bundle):
    strategy = StrategyProcess.constant(np.linspace(0.0, 1.0, 11), [0.1], 0.0)
    scenario = DensityScenario.constant(10, [-0.1])
    args = (strategy, anchor_bundle.model, anchor_bundle.weights, anchor_bundle.penalty)
    estimate, std_error = dual_objective_monte_carlo(scenario, *args, num_paths=20_000, seed=1)
    assert abs(estimate - dual_objective(scenario, *args)) <= 4 * std_error
    again = dual_objective_monte_carlo(scenario, *args, num_paths=20_000, seed=1, workers=4)
    assert again == (estimate, std_error)


def test_monte_carlo_needs_a_uniform_grid(anchor_bundle):
    strategy = StrategyProcess.constant([0.0, 0.2, 1.0], [0.1], 0.0)
    with pytest.raises(LatticeMismatchError):
        dual_objective_monte_carlo(DensityScenario.zero(2, 1), strategy, anchor_bundle.model,
                                   anchor_bundle.weights, anchor_bundle.penalty, num_paths=10)


def test_entropic_closed_forms():
    affine = GaussianFunctional(b=(1.0,))
    assert entropic_closed_form(affine, 1.0, 1.0) == pytest.approx(0.5)
    assert entropic_closed_form(affine, 1.0, 1.0, "concave") == pytest.approx(-0.5)
    assert entropic_closed_form(GaussianFunctional(q=0.1), 1.0, 1.0) == pytest.approx(-0.5 * np.log(0.8))
    with pytest.raises(ClosedFormInapplicableError):
        entropic_closed_form(GaussianFunctional(q=1.0), 1.0, 1.0)


def test_saddle_oracle_on_the_anchor(anchor_bundle):
    b = anchor_bundle
    saddle = saddle_oracle(b.model, b.weights, b.penalty, b.portfolio_set, b.consumption_set, steps=50)
    assert saddle.value == pytest.approx(0.01, abs=1e-6)
    assert saddle.pi == pytest.approx([0.1], abs=1e-3)
    assert saddle.eta == pytest.approx([-0.1], abs=1e-3)
    assert not saddle.lower_bound_only


def test_saddle_oracle_with_a_binding_box():
    bundle = make_bundle(portfolio=ConstraintSet((Box(0.0, 0.05),), 1))
    saddle = saddle_oracle(bundle.model, bundle.weights, bundle.penalty, bundle.portfolio_set,
                           bundle.consumption_set, steps=50)
    report = solve_value_bsde(bundle, 50)
    assert saddle.value == pytest.approx(0.0075, abs=1e-6)
    assert report.V0 == pytest.approx(saddle.value, abs=2e-2)
    assert saddle.pi == pytest.approx(report.pi[0], abs=1e-3)


def test_optimal_strategy_is_a_martingale(anchor_bundle):
    report = solve_value_bsde(anchor_bundle, 100)
    tolerance = calibrate_tolerance(anchor_bundle, 100)
    result = check_supermartingale(report, extract_strategy(report), anchor_bundle, tol=tolerance.tol)
    assert result.passed
    assert max(abs(g) for g in result.gaps.values()) <= tolerance.tol


def test_perturbed_strategies_are_strict_supermartingales(anchor_bundle):
    report = solve_value_bsde(anchor_bundle, 100)
    strategy = extract_strategy(report)
    for perturbed in perturbed_strategies(strategy, anchor_bundle, 10, (0.05, 0.3), seed=3):
        result = check_supermartingale(report, perturbed, anchor_bundle, tol=1e-9)
        assert result.passed
        # gap(0) = -(pi - 0.1)^2 T for a constant shift
        shift = float(perturbed.pi_array()[0, 0] - 0.1)
        assert result.gap_at_zero == pytest.approx(-shift ** 2, abs=1e-10)


def test_lattice_strategy_check_matches_the_ode_check(anchor_bundle):
    report = solve_value_bsde(anchor_bundle, 20, "lattice")
    result = check_supermartingale(report, extract_strategy(report), anchor_bundle, tol=1e-9)
    assert result.passed
    assert result.gap_at_zero == pytest.approx(0.0, abs=1e-12)


def test_crosscheck_on_the_anchor(anchor_bundle):
    cross = robust_value_crosscheck(solve_value_bsde(anchor_bundle, 50), anchor_bundle)
    assert cross.saddle_passed and cross.lowerband_passed
    assert cross.V0_dual_lowerband == pytest.approx(0.01, abs=1e-6)


def test_crosscheck_flags_the_literal_convention(literal_bundle):
    cross = robust_value_crosscheck(solve_value_bsde(literal_bundle, 50), literal_bundle)
    assert cross.saddle_passed is False


def test_closed_form_cross_validation(anchor_bundle, box_bundle, literal_bundle):
    assert crossvalidate_closed_form(anchor_bundle, samples=200).passed
    assert crossvalidate_closed_form(box_bundle, samples=200).passed
    literal = crossvalidate_closed_form(literal_bundle, samples=200)
    assert not literal.passed
    assert literal.max_abs_diff > 1e-3


def test_suite_passes_on_the_anchor(anchor_bundle):
    rows = run_verification_suite(anchor_bundle, 50, settings=FAST, instance="anchor")
    assert all(r.passed for r in rows), [r for r in rows if not r.passed]
    assert len(rows) >= 6
    assert {"martingale_optimal", "saddle_crosscheck", "closed_form_generator"} <= {r.check for r in rows}
    assert all(r.instance == "anchor" for r in rows)


def test_suite_on_the_no_trading_instance():
    bundle = make_bundle(portfolio=ConstraintSet((Singleton(0.0),), 1), x=2.0)
    rows = {r.check: r for r in run_verification_suite(bundle, 30, settings=FAST)}
    assert all(r.passed for r in rows.values())
    assert rows["zero_portfolio_value"].value <= 1e-10


def test_suite_fails_the_literal_convention(literal_bundle):
    rows = {r.check: r for r in run_verification_suite(literal_bundle, 50, settings=FAST)}
    assert not rows["saddle_crosscheck"].passed
    assert not rows["closed_form_generator"].passed
    assert not rows["martingale_optimal"].passed


def test_tolerance_is_calibrated_on_coarser_runs_only(anchor_bundle):
    tolerance = calibrate_tolerance(anchor_bundle, 50)
    assert set(tolerance.max_gap_by_steps) == {12, 25}
    with pytest.raises(StepSizeError):
        calibrate_tolerance(anchor_bundle, 1)


def test_literal_convention_gaps_exceed_the_calibrated_tolerance(literal_bundle):
    report = solve_value_bsde(literal_bundle, 50)
    tolerance = calibrate_tolerance(literal_bundle, 50)
    result = check_supermartingale(report, extract_strategy(report), literal_bundle, tol=tolerance.tol)
    assert max(abs(g) for g in result.gaps.values()) > tolerance.tol


def test_non_optimal_strategy_fails_the_martingale_check(anchor_bundle):
    report = solve_value_bsde(anchor_bundle, 50)
    tolerance = calibrate_tolerance(anchor_bundle, 50)
    idle = StrategyProcess.constant(report.times, [0.0], 0.0)
    result = check_supermartingale(report, idle, anchor_bundle, tol=tolerance.tol)
    # gap(0) = -(0 - 0.1)^2 T
    assert result.gap_at_zero == pytest.approx(-0.01, abs=1e-8)
    assert max(abs(g) for g in result.gaps.values()) > tolerance.tol


def test_node_indexed_strategies_are_perturbed(anchor_bundle):
    report = solve_value_bsde(anchor_bundle, 20, "lattice")
    strategy = extract_strategy(report)
    assert not strategy.is_time_indexed
    for perturbed in perturbed_strategies(strategy, anchor_bundle, 5, (0.05, 0.3), seed=3):
        assert all(p.shape == q.shape for p, q in zip(perturbed.pi, strategy.pi))
        # the same shift at every node of a slice
        first = perturbed.pi[5]
        assert np.allclose(first, first.flat[0])
        result = check_supermartingale(report, perturbed, anchor_bundle, tol=1e-9)
        assert result.passed
        assert result.gap_at_zero < -1e-3


def test_suite_in_lattice_mode_reports_perturbation_rows(anchor_bundle):
    rows = {r.check: r for r in run_verification_suite(anchor_bundle, 20, mode="lattice", settings=FAST)}
    assert rows["supermartingale_perturbed"].passed
    assert rows["strict_suboptimality"].passed
    assert rows["martingale_optimal"].passed
