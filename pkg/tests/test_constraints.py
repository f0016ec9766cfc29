import numpy as np
import pytest
from scipy.optimize import minimize, minimize_scalar

from errors import InfeasibleConsumptionError, InvalidSetError
from market.constraints import (Ball, Box, ConstraintSet, ImageSet, Polytope, Singleton, WholeSpace,
                                argmax_consumption, argmin_portfolio, distance_sq, primitive_from_spec,
                                project, project_interval_images, project_preimage)


def quadratic(y):
    return 0.5 * float(np.sum(np.asarray(y) ** 2))


def test_empty_primitives_are_rejected():
    with pytest.raises(InvalidSetError, match="empty box"):
        Box(1.0, 0.0)
    with pytest.raises(InvalidSetError):
        Polytope([[1.0], [-1.0]], [0.0, -1.0])


def test_primitive_spec_is_strict():
    with pytest.raises(InvalidSetError, match="unknown primitive"):
        primitive_from_spec({"type": "cone"}, 1)
    with pytest.raises(InvalidSetError, match="needs keys"):
        primitive_from_spec({"type": "box", "lo": 0.0}, 1)
    piece = primitive_from_spec({"type": "box", "lo": 0.0, "hi": 0.1}, 2)
    assert piece.lo.tolist() == [0.0, 0.0]


def test_spec_round_trip():
    specs = [{"type": "box", "lo": [0.0], "hi": [0.1]}, {"type": "point", "at": [0.5]},
             {"type": "ball", "center": [1.0], "radius": 0.2}]
    cset = ConstraintSet.from_spec(specs, 1)
    assert ConstraintSet.from_spec(cset.to_spec(), 1).to_spec() == cset.to_spec()
    assert cset.contains([0.5]) and cset.contains([1.1]) and not cset.contains([0.3])


def test_projection_onto_ball():
    image = ImageSet(ConstraintSet((Ball([0.0, 0.0], 1.0),), 2), np.eye(2))
    nearest, index = project(image, [3.0, 4.0])
    assert nearest == pytest.approx([0.6, 0.8], abs=1e-12)
    assert index == 0
    assert distance_sq(image, [0.3, 0.4]) == pytest.approx(0.0, abs=1e-20)


def test_projection_through_a_rank_deficient_image():
    image = ImageSet(ConstraintSet.whole(1), [[1.0, 1.0]])
    pi, _ = project_preimage(image, [1.0, 0.0])
    assert pi == pytest.approx([0.5])
    nearest, _ = project(image, [1.0, 0.0])
    assert nearest == pytest.approx([0.5, 0.5])


def test_union_tie_goes_to_lowest_piece():
    image = ImageSet(ConstraintSet((Box(-2.0, -1.0), Box(1.0, 2.0)), 1), [[1.0]])
    pi, index = project_preimage(image, [0.0])
    assert index == 0
    assert pi == pytest.approx([-1.0])


def test_vectorized_interval_projection_agrees():
    cset = ConstraintSet((Box(-2.0, -1.0), Ball([1.5], 0.5), Singleton(0.25)), 1)
    image = ImageSet(cset, [[0.8, 0.6]])
    points = np.random.default_rng(1).normal(scale=2.0, size=(50, 2))
    pis, indices = project_interval_images(image, points)
    for point, pi, index in zip(points, pis, indices):
        expected, expected_index = project_preimage(image, point)
        assert pi == pytest.approx(expected[0], abs=1e-10)
        assert index == expected_index


def test_consumption_peak_and_clamp():
    whole = ConstraintSet((Box(0.0, np.inf),), 1)
    c, value = argmax_consumption(whole, 0.5, 1.0, 1.0)
    assert c == pytest.approx(0.5)
    assert value == pytest.approx(0.5 * np.log(0.5) - 0.5)
    c, value = argmax_consumption(ConstraintSet((Box(1.0, 2.0),), 1), 0.5, 1.0, 1.0)
    assert (c, value) == pytest.approx((1.0, -1.0))


def test_consumption_without_reward_is_cheapest_feasible():
    c, value = argmax_consumption(ConstraintSet((Box(0.2, 1.0),), 1), 0.0, 1.0, 2.0)
    assert (c, value) == pytest.approx((0.2, -0.4))


def test_consumption_needs_positive_rate_when_rewarded():
    with pytest.raises(InfeasibleConsumptionError):
        argmax_consumption(ConstraintSet((Box(-1.0, 0.0),), 1), 0.5, 1.0, 1.0)


def test_quadratic_portfolio_step():
    # calibrated anchor scales: minimize 1/2 y^2 - 0.2 y + 1/2 y^2 over y = pi
    pi, value = argmin_portfolio(ConstraintSet.whole(1), [[1.0]], [0.2], quadratic, 1.0, 1.0, [0.0],
                                 theta_sign=-1.0, ito_weight=1.0, quadratic_coef=0.5)
    assert pi == pytest.approx([0.1])
    assert value == pytest.approx(-0.01)


@pytest.mark.parametrize("pieces,expected", [
    ((WholeSpace(1),), 0.1),
    ((Box(0.0, 0.05),), 0.05),
    ((Box(-1.0, -0.5), Box(0.3, 1.0)), 0.3),
])
def test_descent_agrees_with_projection(pieces, expected):
    aset = ConstraintSet(pieces, 1)
    kwargs = dict(theta_sign=-1.0, ito_weight=1.0)
    exact, exact_value = argmin_portfolio(aset, [[1.0]], [0.2], quadratic, 1.0, 1.0, [0.0],
                                          quadratic_coef=0.5, **kwargs)
    descent, descent_value = argmin_portfolio(aset, [[1.0]], [0.2], quadratic, 1.0, 1.0, [0.0],
                                              g_grad=lambda y: np.asarray(y), **kwargs)
    assert exact == pytest.approx([expected], abs=1e-12)
    assert descent == pytest.approx(exact, abs=1e-7)
    assert descent_value == pytest.approx(exact_value, abs=1e-12)


def test_descent_in_two_assets_on_a_box():
    aset = ConstraintSet((Box([0.0, 0.0], [0.05, 1.0]),), 2)
    theta = np.array([0.2, 0.1])
    kwargs = dict(theta_sign=-1.0, ito_weight=1.0)
    exact, _ = argmin_portfolio(aset, np.eye(2), theta, quadratic, 1.0, 1.0, [0.0, 0.0],
                                quadratic_coef=0.5, **kwargs)
    descent, _ = argmin_portfolio(aset, np.eye(2), theta, quadratic, 1.0, 1.0, [0.0, 0.0],
                                  g_grad=lambda y: np.asarray(y), **kwargs)
    assert exact == pytest.approx([0.05, 0.05], abs=1e-12)
    assert descent == pytest.approx(exact, abs=1e-7)


def test_box_projection_with_more_factors_than_assets():
    image = ImageSet(ConstraintSet((Box([0.0, 0.0], [0.1, 0.1]),), 2), [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    nearest, index = project(image, [0.5, 0.5, 0.5])
    assert nearest == pytest.approx([0.1, 0.1, 0.0], abs=1e-10)
    assert index == 0


def test_box_projection_with_more_assets_than_factors():
    image = ImageSet(ConstraintSet((Box([0.0, 0.0], [0.1, 0.1]),), 2), [[1.0], [1.0]])
    nearest, _ = project(image, [0.5])
    assert nearest == pytest.approx([0.2], abs=1e-8)
    assert distance_sq(image, [0.15]) == pytest.approx(0.0, abs=1e-12)
    assert distance_sq(image, [-0.3]) == pytest.approx(0.09, abs=1e-8)


def test_union_projection_picks_the_nearer_piece():
    image = ImageSet(ConstraintSet((Box(-1.0, 0.0), Box(0.2, 0.3)), 1), [[1.0]])
    pi, index = project_preimage(image, [0.12])
    assert pi == pytest.approx([0.2])
    assert index == 1
    assert distance_sq(image, [0.12]) == pytest.approx(0.0064)


def _mixed_image():
    cset = ConstraintSet((Box([-1.0, 0.0], [-0.2, 0.5]), Ball([0.6, 0.4], 0.3)), 2)
    return ImageSet(cset, [[1.0, 0.3], [0.0, 0.8]])


def test_projection_is_idempotent():
    image = _mixed_image()
    for point in np.random.default_rng(5).normal(scale=1.5, size=(50, 2)):
        once, _ = project(image, point)
        twice, _ = project(image, once)
        assert twice == pytest.approx(once, abs=1e-8)
        assert distance_sq(image, once) == pytest.approx(0.0, abs=1e-12)


def test_distance_is_one_lipschitz():
    image = _mixed_image()
    rng = np.random.default_rng(6)
    for p, q in zip(rng.normal(scale=1.5, size=(50, 2)), rng.normal(scale=1.5, size=(50, 2))):
        gap = abs(np.sqrt(distance_sq(image, p)) - np.sqrt(distance_sq(image, q)))
        assert gap <= np.linalg.norm(p - q) + 1e-9


def _consumption_brute_force(intervals, alpha, cost):
    best = -np.inf
    for lo, hi in intervals:
        def objective(c):
            return -(alpha * np.log(c) - cost * c)
        res = minimize_scalar(objective, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
        best = max(best, -res.fun, -objective(lo), -objective(hi))
    return best


def test_consumption_matches_brute_force():
    intervals = [(0.05, 0.3), (0.8, 2.0)]
    cset = ConstraintSet(tuple(Box(lo, hi) for lo, hi in intervals), 1)
    rng = np.random.default_rng(7)
    for alpha, alpha_bar, h_t in zip(rng.uniform(0.1, 1.0, 100), rng.uniform(0.5, 2.0, 100),
                                     rng.uniform(0.4, 1.5, 100)):
        c, value = argmax_consumption(cset, alpha, alpha_bar, h_t)
        assert value == pytest.approx(alpha * np.log(c) - alpha_bar * h_t * c, abs=1e-14)
        assert value == pytest.approx(_consumption_brute_force(intervals, alpha, alpha_bar * h_t), abs=1e-8)


PORTFOLIO_CASES = [
    (ConstraintSet((Box(-1.0, -0.3), Box(0.2, 1.0)), 1), [[1.3]]),
    (ConstraintSet((Box([-1.0, -1.0], [-0.2, 0.5]), Box([0.1, 0.0], [1.0, 1.0])), 2), [[1.0, 0.3], [0.0, 0.8]]),
]


def _portfolio_brute_force(aset, sigma, theta, z):
    sigma = np.asarray(sigma)

    def phi(pi):
        exposure = np.asarray(pi) @ sigma
        return quadratic(z + exposure) - exposure @ theta + 0.5 * exposure @ exposure

    best = np.inf
    for piece in aset.pieces:
        axes = [np.linspace(lo, hi, 201 if aset.dim == 1 else 21) for lo, hi in zip(piece.lo, piece.hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, aset.dim)
        start = min(grid, key=phi)
        res = minimize(phi, start, method="L-BFGS-B", bounds=list(zip(piece.lo, piece.hi)),
                       options={"ftol": 1e-15, "gtol": 1e-12})
        best = min(best, res.fun, phi(start))
    return best


@pytest.mark.parametrize("aset,sigma", PORTFOLIO_CASES)
def test_portfolio_step_matches_brute_force(aset, sigma):
    rng = np.random.default_rng(9)
    m = np.asarray(sigma).shape[1]
    for z, theta in zip(rng.normal(scale=0.5, size=(100, m)), rng.normal(scale=0.5, size=(100, m))):
        pi, value = argmin_portfolio(aset, sigma, theta, quadratic, 1.0, 1.0, z,
                                     theta_sign=-1.0, ito_weight=1.0, quadratic_coef=0.5)
        assert aset.contains(pi)
        assert value == pytest.approx(_portfolio_brute_force(aset, sigma, theta, z), abs=1e-6)
