"""
Market primitives: coefficients, problem weights, strategies and wealth dynamics
"""
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from config import MC_CHUNK_SIZE
from errors import CoefficientDegeneracyError, InadmissibleStrategyError
from market.piecewise import PiecewiseConstant

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MarketModel:
    """
    d risky assets driven by an m-dimensional Brownian motion (d <= m).

    drift b(t) in R^d and volatility sigma(t) in R^{d x m} are piecewise
    constant in time; eps and K are the ellipticity bounds of sigma sigma^T.
    """

    num_assets: int
    brownian_dim: int
    drift: PiecewiseConstant
    volatility: PiecewiseConstant
    eps: float
    K: float

    def __post_init__(self):
        d, m = self.num_assets, self.brownian_dim
        if d < 1 or m < 1:
            raise ValueError("num_assets and brownian_dim must be positive")
        if d > m:
            raise ValueError(f"num_assets d={d} exceeds brownian_dim m={m}")
        if self.drift.value_shape != (d,):
            raise ValueError(f"drift must have shape ({d},), got {self.drift.value_shape}")
        if self.volatility.value_shape != (d, m):
            raise ValueError(f"volatility must have shape ({d}, {m}), got {self.volatility.value_shape}")
        if not 0 < self.eps < self.K:
            raise ValueError(f"ellipticity bounds need 0 < eps < K, got eps={self.eps}, K={self.K}")

    @classmethod
    def constant(cls, b, sigma, eps: float = 1e-4, K: float = 1e4) -> "MarketModel":
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        return cls(sigma.shape[0], sigma.shape[1], PiecewiseConstant.constant(b),
                   PiecewiseConstant.constant(sigma), eps, K)

    def b(self, t: float) -> np.ndarray:
        return self.drift.at(t)

    def sigma(self, t: float) -> np.ndarray:
        return self.volatility.at(t)

    @property
    def breakpoints(self) -> np.ndarray:
        return np.union1d(self.drift.breaks, self.volatility.breaks)

    @property
    def is_constant(self) -> bool:
        return self.drift.is_constant and self.volatility.is_constant


@dataclass(frozen=True, eq=False)
class ProblemWeights:
    """Utility weights, discounting, horizon and initial wealth"""

    alpha: float
    alpha_bar: float
    beta: float
    delta: PiecewiseConstant
    horizon: float
    initial_wealth: float

    def __post_init__(self):
        if not self.initial_wealth > 0:
            raise ValueError(f"initial_wealth must be strictly positive, got {self.initial_wealth}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if not self.alpha_bar > 0:
            raise ValueError(f"alpha_bar must be positive, got {self.alpha_bar}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.delta.value_shape != ():
            raise ValueError("delta must be a scalar process")
        if np.any(self.delta.values < 0):
            raise ValueError("delta must be nonnegative")

        # int_0^t delta is piecewise linear: exact by interpolation on the kinks
        inner = self.delta.breaks[(self.delta.breaks > 0) & (self.delta.breaks < self.horizon)]
        knots = np.concatenate(([0.0], inner, [self.horizon]))
        cumulative = np.array([self.delta.integral(0.0, k) for k in knots])
        object.__setattr__(self, "_knots", knots)
        object.__setattr__(self, "_cumulative", cumulative)

    @classmethod
    def constant(cls, alpha: float, alpha_bar: float, beta: float, delta: float,
                 horizon: float, initial_wealth: float) -> "ProblemWeights":
        return cls(alpha, alpha_bar, beta, PiecewiseConstant.constant(delta), horizon, initial_wealth)

    def with_wealth(self, initial_wealth: float) -> "ProblemWeights":
        return ProblemWeights(self.alpha, self.alpha_bar, self.beta, self.delta,
                              self.horizon, initial_wealth)

    def discount_integral(self, t):
        """int_0^t delta_u du, exact and vectorized over t in [0, T]"""
        return np.interp(t, self._knots, self._cumulative)

    def discount(self, t):
        """e^{-int_0^t delta}"""
        return np.exp(-self.discount_integral(t))

    def discounted_measure(self, a: float, b: float) -> float:
        """int_a^b e^{-int_0^u delta} du, exact"""
        return self.delta.exp_integral(a, b, t0=0.0)


@dataclass(frozen=True, eq=False)
class StrategyProcess:
    """
    Portfolio fractions pi (row vector in R^{1 x d}) and consumption rates c.

    ``pi[k]`` / ``c[k]`` hold the control on [t_k, t_{k+1}); each entry is
    either time-indexed (shape ``(d,)`` / ``()``) or lattice-node-indexed
    (shape ``(k+1,)*m + (d,)`` / ``(k+1,)*m``).
    """

    times: np.ndarray
    pi: Tuple[np.ndarray, ...]
    c: Tuple[np.ndarray, ...]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        pi = tuple(np.asarray(p, dtype=float) for p in self.pi)
        c = tuple(np.asarray(v, dtype=float) for v in self.c)
        if len(pi) != times.size - 1 or len(c) != times.size - 1:
            raise ValueError("strategy needs one control per time step")
        for k, ck in enumerate(c):
            if not np.all(np.isfinite(ck)) or np.any(ck < 0):
                raise InadmissibleStrategyError(f"consumption must be finite and nonnegative (step {k})")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "c", c)

    @classmethod
    def constant(cls, times: Sequence[float], pi, c: float) -> "StrategyProcess":
        times = np.asarray(times, dtype=float)
        pi = np.atleast_1d(np.asarray(pi, dtype=float))
        steps = times.size - 1
        return cls(times, tuple(pi for _ in range(steps)), tuple(np.asarray(float(c)) for _ in range(steps)))

    @classmethod
    def time_indexed(cls, times: Sequence[float], pi: np.ndarray, c: np.ndarray) -> "StrategyProcess":
        pi = np.asarray(pi, dtype=float)
        c = np.asarray(c, dtype=float)
        return cls(times, tuple(pi[k] for k in range(pi.shape[0])), tuple(c[k] for k in range(c.shape[0])))

    @property
    def steps(self) -> int:
        return len(self.pi)

    @property
    def num_assets(self) -> int:
        return self.pi[0].shape[-1]

    @property
    def is_time_indexed(self) -> bool:
        return all(p.ndim == 1 for p in self.pi) and all(v.ndim == 0 for v in self.c)

    def pi_array(self) -> np.ndarray:
        if not self.is_time_indexed:
            raise InadmissibleStrategyError("strategy is node-indexed; no time series available")
        return np.stack(self.pi)

    def c_array(self) -> np.ndarray:
        if not self.is_time_indexed:
            raise InadmissibleStrategyError("strategy is node-indexed; no time series available")
        return np.array([float(v) for v in self.c])


@dataclass(frozen=True)
class EllipticityReport:
    ok: bool
    worst_eigen_low: float
    worst_eigen_high: float


def market_price_of_risk(model: MarketModel, t: float) -> np.ndarray:
    """
    theta_t = sigma^T (sigma sigma^T)^{-1} b, the solution of sigma theta = b
    lying in the row space of sigma

    Raises:
        CoefficientDegeneracyError: if sigma sigma^T is singular at t
    """
    sigma = model.sigma(t)
    gram = sigma @ sigma.T
    eigen = np.linalg.eigvalsh(gram)
    if eigen[0] <= np.finfo(float).eps * max(1.0, eigen[-1]) * gram.shape[0]:
        raise CoefficientDegeneracyError(
            f"sigma sigma^T is singular at t={t} (smallest eigenvalue {eigen[0]:.3g})"
        )
    return sigma.T @ np.linalg.solve(gram, model.b(t))


def check_ellipticity(model: MarketModel) -> EllipticityReport:
    """Eigenvalues of sigma sigma^T over all pieces against [eps, K]"""
    low, high = np.inf, -np.inf
    for sigma in model.volatility.values:
        eigen = np.linalg.eigvalsh(sigma @ sigma.T)
        low = min(low, float(eigen[0]))
        high = max(high, float(eigen[-1]))
    ok = low >= model.eps and high <= model.K
    if not ok:
        logger.debug("ellipticity check failed: eigenvalues in [%g, %g], bounds [%g, %g]",
                     low, high, model.eps, model.K)
    return EllipticityReport(ok=ok, worst_eigen_low=low, worst_eigen_high=high)


def log_wealth_drift(model: MarketModel, t: float, pi: np.ndarray, c) -> np.ndarray:
    """pi sigma theta - 1/2 |pi sigma|^2 - c, vectorized over leading axes of pi"""
    exposure = pi @ model.sigma(t)
    theta = market_price_of_risk(model, t)
    return exposure @ theta - 0.5 * np.sum(exposure ** 2, axis=-1) - c


def simulate_wealth(model: MarketModel, weights: ProblemWeights, strategy: StrategyProcess,
                    increments: np.ndarray) -> np.ndarray:
    """
    Wealth X_t = x E(pi sigma . W^Q)_t exp(-int c) on the strategy time grid

    Left-point (Ito) Euler on log-wealth, exact for controls that are
    constant over each step.

    Args:
        increments: Brownian increments, shape (N, m) or (paths, N, m)

    Returns:
        Wealth path(s), shape (N+1,) or (paths, N+1)
    """
    if not strategy.is_time_indexed:
        raise InadmissibleStrategyError("simulate_wealth needs a time-indexed strategy")
    c = strategy.c_array()
    if np.any(c < 0) or (weights.alpha > 0 and np.any(c <= 0)):
        raise InadmissibleStrategyError("consumption must be positive when alpha > 0")

    increments = np.asarray(increments, dtype=float)
    single = increments.ndim == 2
    if single:
        increments = increments[np.newaxis]
    steps = strategy.steps
    if increments.shape[1] != steps or increments.shape[2] != model.brownian_dim:
        raise ValueError(f"increments must have shape (paths, {steps}, {model.brownian_dim})")

    pi = strategy.pi_array()
    dt = np.diff(strategy.times)
    log_growth = np.zeros((increments.shape[0], steps + 1))
    for k in range(steps):
        t = strategy.times[k]
        exposure = pi[k] @ model.sigma(t)
        drift = float(log_wealth_drift(model, t, pi[k], c[k]))
        log_growth[:, k + 1] = log_growth[:, k] + increments[:, k, :] @ exposure + drift * dt[k]

    wealth = weights.initial_wealth * np.exp(log_growth)
    return wealth[0] if single else wealth


def brownian_increments(num_paths: int, steps: int, dim: int, dt: float, seed: int,
                        chunk_size: int = MC_CHUNK_SIZE) -> np.ndarray:
    """
    Gaussian increments with one spawned generator per fixed-size chunk of paths,
    so the draw does not depend on how chunks are distributed over workers
    """
    children = np.random.SeedSequence(seed).spawn(max(1, -(-num_paths // chunk_size)))
    blocks = []
    for i, child in enumerate(children):
        size = min(chunk_size, num_paths - i * chunk_size)
        rng = np.random.default_rng(child)
        blocks.append(rng.standard_normal((size, steps, dim)) * np.sqrt(dt))
    return np.concatenate(blocks, axis=0)


def realized_utility(weights: ProblemWeights, strategy: StrategyProcess, wealth: np.ndarray) -> np.ndarray:
    """
    Pathwise discounted log utility
    sum_k alpha int_{t_k}^{t_{k+1}} D ln(c_k X_{t_k}) + alpha_bar D_T ln X_T

    Args:
        wealth: shape (paths, N+1) on the strategy grid
    """
    wealth = np.atleast_2d(wealth)
    log_wealth = np.log(wealth)
    total = weights.alpha_bar * float(weights.discount(weights.horizon)) * log_wealth[:, -1]
    if weights.alpha > 0:
        times = strategy.times
        c = strategy.c_array()
        for k in range(strategy.steps):
            step = weights.alpha * weights.discounted_measure(times[k], times[k + 1])
            total = total + step * (np.log(c[k]) + log_wealth[:, k])
    return total
