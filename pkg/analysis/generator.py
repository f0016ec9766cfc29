"""
Deterministic scalar functions and BSDE generators of the robust
log-utility problem: h(t), rho(t), g(t, z) and the value generator f(t, z)
"""
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Optional, Tuple

import numpy as np

from config import CONVENTIONS, DEFAULT_CONVENTION
from errors import ClosedFormInapplicableError, NumericFaultError
from market.constraints import (ConstraintSet, ImageSet, argmax_consumption, argmin_portfolio,
                                distance_sq, project_interval_images)
from market.model import MarketModel, ProblemWeights, market_price_of_risk
from market.penalty import PenaltySpec, conjugate, conjugate_argmax

logger = logging.getLogger(__name__)


class HFunction:
    """
    Solution of the Cauchy problem  alpha_bar h' = alpha_bar delta h - alpha,  h(T) = 1:

        h(t) = e^{-int_t^T delta} + (alpha/alpha_bar) e^{int_0^t delta} int_t^T e^{-int_0^u delta} du
    """

    def __init__(self, weights: ProblemWeights):
        self.weights = weights

    def __call__(self, t) -> np.ndarray:
        w = self.weights
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t_arr < 0) or np.any(t_arr > w.horizon):
            raise ValueError(f"h(t) is defined on [0, {w.horizon}], got t={t}")
        out = np.empty_like(t_arr)
        total = w.discount_integral(w.horizon)
        for i, s in enumerate(t_arr):
            to_s = float(w.discount_integral(s))
            out[i] = np.exp(-(total - to_s))
            if w.alpha > 0:
                out[i] += (w.alpha / w.alpha_bar) * np.exp(to_s) * w.discounted_measure(s, w.horizon)
        if np.ndim(t) == 0:
            return float(out[0])
        return out


def h_of_t(weights: ProblemWeights, t):
    return HFunction(weights)(t)


def rho(weights: ProblemWeights, t):
    """rho_t = alpha / (alpha_bar h(t))"""
    return weights.alpha / (weights.alpha_bar * h_of_t(weights, t))


class OptimizerCache:
    """Per-slice store of generator values and optimizers, safe for concurrent insertion"""

    def __init__(self):
        self._store: Dict[tuple, tuple] = {}
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            return self._store.get(key)

    def put(self, key, value):
        with self._lock:
            self._store.setdefault(key, value)
            return self._store[key]

    def clear(self):
        with self._lock:
            self._store.clear()

    def __len__(self):
        with self._lock:
            return len(self._store)


class GeneratorBundle:
    """
    Everything needed to evaluate g and f at (t, z)

    The convention selects how f is assembled:
      - calibrated: f = sup_c(alpha ln c - a c)/a - inf_pi[ g(aD(z + pi sigma))/(aD)
                    - pi sigma theta + 1/2 |pi sigma|^2 ]
      - literal-paper: f = D sup_c(alpha ln c - a c)/a - inf_pi[ g(aD(z + pi sigma))/a
                    + pi sigma theta ]
    with a = alpha_bar h(t) and D = e^{-int_0^t delta}.
    """

    def __init__(self, model: MarketModel, weights: ProblemWeights, penalty: PenaltySpec,
                 portfolio_set: ConstraintSet, consumption_set: ConstraintSet,
                 convention: str = DEFAULT_CONVENTION):
        if convention not in CONVENTIONS:
            raise ValueError(f"unknown convention '{convention}' (expected one of {CONVENTIONS})")
        if penalty.dim != model.brownian_dim:
            raise ValueError(f"penalty dimension {penalty.dim} != brownian_dim {model.brownian_dim}")
        if portfolio_set.dim != model.num_assets:
            raise ValueError(f"portfolio set dimension {portfolio_set.dim} != num_assets {model.num_assets}")
        if consumption_set.dim != 1:
            raise ValueError("consumption set must be one-dimensional")
        self.model = model
        self.weights = weights
        self.penalty = penalty
        self.portfolio_set = portfolio_set
        self.consumption_set = consumption_set
        self.convention = convention
        self.h = HFunction(weights)
        self.cache = OptimizerCache()

    def with_convention(self, convention: str) -> "GeneratorBundle":
        return GeneratorBundle(self.model, self.weights, self.penalty, self.portfolio_set,
                               self.consumption_set, convention)

    def discount(self, t) -> float:
        return float(self.weights.discount(t))

    def g(self, t: float, z) -> np.ndarray:
        return g_generator(self, t, z)

    def g_grad(self, t: float, z) -> np.ndarray:
        """A subgradient of g(t, .) at z (Danskin: the conjugate maximizer)"""
        scale = self.weights.beta * self.discount(t)
        return conjugate_argmax(self.penalty, np.asarray(z, dtype=float) / scale)

    def quadratic_coef(self, t: float) -> Optional[float]:
        """coef with g(t, z) = coef |z|^2, or None if g is not globally quadratic"""
        if self.penalty.kind == "quadratic" and np.isinf(self.penalty.domain_radius):
            return 1.0 / (2.0 * self.penalty.weight * self.weights.beta * self.discount(t))
        return None

    def portfolio_scales(self, t: float) -> Tuple[float, float, float, float]:
        """(scale_a, scale_b, theta_sign, ito_weight) of the portfolio objective"""
        a = self.weights.alpha_bar * self.h(t)
        D = self.discount(t)
        if self.convention == "calibrated":
            return a * D, 1.0 / (a * D), -1.0, 1.0
        return a * D, 1.0 / a, 1.0, 0.0

    def consumption_term(self, t: float) -> Tuple[float, float]:
        """(c*, consumption contribution to f)"""
        a = self.weights.alpha_bar * self.h(t)
        c_star, value = argmax_consumption(self.consumption_set, self.weights.alpha,
                                           self.weights.alpha_bar, self.h(t))
        if self.convention == "calibrated":
            return c_star, value / a
        return c_star, self.discount(t) * value / a


def g_generator(bundle: GeneratorBundle, t: float, z) -> np.ndarray:
    """
    g(t, z) = beta D(t) h*( z / (beta D(t)) ), vectorized over the last axis of z;
    +inf propagates from the conjugate
    """
    scale = bundle.weights.beta * bundle.discount(t)
    z = np.asarray(z, dtype=float)
    value = scale * conjugate(bundle.penalty, z / scale)
    if z.ndim <= 1:
        return float(np.squeeze(value))
    return value


def robust_generator(bundle: GeneratorBundle, direction: str = "concave"):
    """
    Generator of the nonlinear expectation in the requested direction:
    +g for the convex (sup) one, -g for the robust worst-case (inf) one
    """
    if direction not in ("convex", "concave"):
        raise ValueError(f"direction must be 'convex' or 'concave', got {direction}")
    sign = 1.0 if direction == "convex" else -1.0

    def generator(t, z):
        return sign * g_generator(bundle, t, z)

    return generator


def f_generator(bundle: GeneratorBundle, t: float, z) -> Tuple[float, np.ndarray, float]:
    """
    Value generator f(t, z) with its pointwise optimizers

    Returns:
        (f value, pi*(t, z), c*(t))
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    c_star, consumption = bundle.consumption_term(t)
    scale_a, scale_b, theta_sign, ito_weight = bundle.portfolio_scales(t)
    pi_star, phi = argmin_portfolio(
        bundle.portfolio_set, bundle.model.sigma(t), market_price_of_risk(bundle.model, t),
        lambda y: g_generator(bundle, t, y), scale_a, scale_b, z,
        theta_sign=theta_sign, ito_weight=ito_weight,
        quadratic_coef=bundle.quadratic_coef(t), g_grad=lambda y: bundle.g_grad(t, y),
    )
    value = consumption - phi
    if np.isnan(value):
        raise NumericFaultError(f"f evaluated to NaN at t={t}, z={z.tolist()}")
    return float(value), pi_star, c_star


def f_on_slice(bundle: GeneratorBundle, key: tuple, t: float, zs: np.ndarray, workers: int = 1):
    """
    f at every node of one lattice slice, cached under ``key`` (lattice size, slice index)

    Args:
        zs: shape (n, m)
        workers: threads for node-by-node optimization; results keep node order

    Returns:
        (values (n,), pi* (n, d), c* scalar)
    """
    cached = bundle.cache.get(key)
    if cached is not None:
        return cached

    coef = bundle.quadratic_coef(t)
    if coef is not None and bundle.model.num_assets == 1:
        values, pis, c_star = _f_quadratic_line(bundle, t, zs, coef)
    else:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                rows = list(executor.map(lambda z: f_generator(bundle, t, z), zs))
        else:
            rows = [f_generator(bundle, t, z) for z in zs]
        values = np.array([r[0] for r in rows])
        pis = np.stack([r[1] for r in rows])
        c_star = rows[0][2]
    return bundle.cache.put(key, (values, pis, c_star))


def _f_quadratic_line(bundle: GeneratorBundle, t: float, zs: np.ndarray, coef: float):
    """Vectorized f for a single asset and a globally quadratic g"""
    c_star, consumption = bundle.consumption_term(t)
    scale_a, scale_b, theta_sign, ito_weight = bundle.portfolio_scales(t)
    sigma = bundle.model.sigma(t)
    theta = market_price_of_risk(bundle.model, t)
    curvature = 2.0 * coef * scale_a ** 2 * scale_b
    targets = -(curvature * zs + theta_sign * theta) / (curvature + ito_weight)
    pis, _ = project_interval_images(ImageSet(bundle.portfolio_set, sigma), targets)
    exposure = pis[:, np.newaxis] * sigma[0]
    phi = (scale_b * coef * scale_a ** 2 * np.sum((zs + exposure) ** 2, axis=1)
           + theta_sign * exposure @ theta + 0.5 * ito_weight * np.sum(exposure ** 2, axis=1))
    return consumption - phi, pis[:, np.newaxis], c_star


def f_entropic_closed_form(bundle: GeneratorBundle, t: float, z) -> float:
    """
    Closed form of f for the entropic penalty h = 1/2 |x|^2

    literal-paper evaluates the printed formula
        (D/a)(alpha ln(alpha/a) - alpha) - (a D/beta) d^2(z + beta theta/(2 a D), sigma A)
        - z theta - beta |theta|^2 / (4 a D);
    calibrated completes the square of its own portfolio objective with
    kappa = a/beta, p = (theta - kappa z)/(kappa + 1):
        (alpha ln(alpha/a) - alpha)/a - (kappa+1)/2 d^2(p, sigma A)
        - kappa/2 |z|^2 + |theta - kappa z|^2 / (2 (kappa + 1)).

    Raises:
        ClosedFormInapplicableError: non-entropic penalty, or alpha/(alpha_bar h)
            outside the consumption set
    """
    w = bundle.weights
    if not bundle.penalty.is_entropic:
        raise ClosedFormInapplicableError("closed form needs the quadratic penalty with weight 1 on the whole space")
    a = w.alpha_bar * bundle.h(t)
    D = bundle.discount(t)
    if w.alpha > 0:
        c_hat = w.alpha / a
        if not bundle.consumption_set.contains(c_hat):
            raise ClosedFormInapplicableError(
                f"unconstrained consumption optimum {c_hat:.6g} lies outside the consumption set at t={t}"
            )
        first = (w.alpha * np.log(w.alpha / a) - w.alpha) / a
    else:
        first = 0.0

    z = np.atleast_1d(np.asarray(z, dtype=float))
    theta = market_price_of_risk(bundle.model, t)
    image = ImageSet(bundle.portfolio_set, bundle.model.sigma(t))
    if bundle.convention == "literal-paper":
        shift = w.beta / (2.0 * a * D)
        return float(D * first - (a * D / w.beta) * distance_sq(image, z + shift * theta)
                     - z @ theta - 0.5 * shift * theta @ theta)

    kappa = a / w.beta
    residual = theta - kappa * z
    target = residual / (kappa + 1.0)
    return float(first - 0.5 * (kappa + 1.0) * distance_sq(image, target)
                 - 0.5 * kappa * z @ z + residual @ residual / (2.0 * (kappa + 1.0)))
