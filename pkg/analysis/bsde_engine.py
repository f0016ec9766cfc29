"""
BSDE solver on a recombining binomial lattice, plus the backward ODE fast path
for deterministic coefficients
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from config import DEFAULT_MODE, MAX_LATTICE_BROWNIAN_DIM, MODES
from errors import DomainViolationError, LatticeDimensionError, NumericFaultError
from analysis.generator import GeneratorBundle, f_generator, f_on_slice
from market.model import StrategyProcess

logger = logging.getLogger(__name__)


class Lattice:
    """
    Recombining binomial lattice for an m-dimensional Brownian motion.

    Each component moves +-sqrt(dt) with probability 1/2; slice k holds
    (k+1)^m nodes indexed by the number of up-moves per component, so the
    node value of W is (2 j - k) sqrt(dt).
    """

    def __init__(self, num_steps: int, horizon: float, brownian_dim: int):
        if num_steps < 1:
            raise ValueError(f"lattice needs at least one step, got {num_steps}")
        if not 1 <= brownian_dim <= MAX_LATTICE_BROWNIAN_DIM:
            raise LatticeDimensionError(
                "model.m", f"lattice workflows support 1 <= m <= {MAX_LATTICE_BROWNIAN_DIM}, got m={brownian_dim}"
            )
        self.num_steps = num_steps
        self.horizon = horizon
        self.dim = brownian_dim
        self.dt = horizon / num_steps
        self.sqrt_dt = np.sqrt(self.dt)
        self.times = np.linspace(0.0, horizon, num_steps + 1)
        # up/down pattern of each of the 2^m branches
        self.branches = np.array(list(itertools.product((0, 1), repeat=brownian_dim)), dtype=int)
        self.branch_increments = (2 * self.branches - 1) * self.sqrt_dt

    def slice_shape(self, k: int) -> Tuple[int, ...]:
        return (k + 1,) * self.dim

    def positions(self, k: int) -> np.ndarray:
        """W at every node of slice k, shape slice_shape(k) + (m,)"""
        axis = (2.0 * np.arange(k + 1) - k) * self.sqrt_dt
        grids = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack(grids, axis=-1)

    def child_views(self, values: np.ndarray, k: int):
        """For each branch, the child values aligned with the parent nodes of slice k"""
        for branch in self.branches:
            yield branch, values[tuple(slice(b, b + k + 1) for b in branch)]

    def conditional(self, values: np.ndarray, k: int, probabilities: Optional[np.ndarray] = None):
        """
        E[V_{k+1} | node] and E[V_{k+1} dW | node] at slice k

        Args:
            values: slice k+1 values, shape slice_shape(k+1) (+ trailing axes)
            probabilities: optional per-branch weights, shape (2^m,) + slice_shape(k);
                uniform 2^{-m} otherwise
        """
        mean = 0.0
        cross = 0.0
        for i, (branch, child) in enumerate(self.child_views(values, k)):
            weight = 1.0 / len(self.branches) if probabilities is None else probabilities[i]
            increment = (2 * branch - 1) * self.sqrt_dt
            mean = mean + weight * child
            cross = cross + (weight * child)[..., np.newaxis] * increment
        return mean, cross


@dataclass
class LatticeSolution:
    """Y and Z per node per slice; Z at slice k is E[Y_{k+1} dW | node] / dt"""

    lattice: Lattice
    Y: List[np.ndarray]
    Z: List[np.ndarray]
    tag: str = ""

    @property
    def Y0(self) -> float:
        return float(self.Y[0].reshape(-1)[0])


@dataclass
class ValueReport:
    """
    Solution of the value BSDE; V0 = alpha_bar h(0) (ln x - Y0)

    On the ODE path Y, f0, h and rho are time series on the uniform grid and
    the optimizers are time-indexed; on the lattice path the optimizers are
    node-indexed per slice.
    """

    Y0: float
    V0: float
    h0: float
    mode: str
    convention: str
    steps: int
    times: np.ndarray
    Y: Optional[np.ndarray] = None
    f0: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    rho: Optional[np.ndarray] = None
    pi: Union[np.ndarray, List[np.ndarray], None] = None
    c: Union[np.ndarray, List[np.ndarray], None] = None
    solution: Optional[LatticeSolution] = None
    metadata: dict = field(default_factory=dict)


def terminal_values(lattice: Lattice, terminal) -> np.ndarray:
    """Terminal slice from an array, a constant or a callable of W_T (shape (..., m))"""
    shape = lattice.slice_shape(lattice.num_steps)
    if callable(terminal):
        values = np.asarray(terminal(lattice.positions(lattice.num_steps)), dtype=float)
    else:
        values = np.asarray(terminal, dtype=float)
    return np.broadcast_to(values, shape).astype(float)


def check_finite(values: np.ndarray, k: int, z: np.ndarray, what: str) -> np.ndarray:
    bad = ~np.isfinite(values)
    if bad.any():
        node = np.unravel_index(int(np.flatnonzero(bad)[0]), values.shape)
        z_at = z[node]
        if np.isnan(values[node]):
            raise NumericFaultError(f"{what} is NaN at k={k}, node={tuple(int(i) for i in node)}")
        raise DomainViolationError(f"{what} is infinite", slice_index=k, node=node, z=z_at)
    return values


def g_expectation(lattice: Lattice, generator: Callable, terminal, store: bool = True) -> LatticeSolution:
    """
    Conditional g-expectation by backward induction (dY = -g dt + Z dW):

        Z_k = E[Y_{k+1} dW] / dt,   Y_k = E[Y_{k+1}] + g(t_k, Z_k) dt

    Args:
        generator: (t, z) -> g, vectorized over z of shape (n, m)
        terminal: terminal values (array, constant or callable of W_T)
        store: keep every slice (otherwise only slice 0 and the terminal slice)
    """
    m = lattice.dim
    Y_next = terminal_values(lattice, terminal)
    Ys = [Y_next] if store else []
    Zs = []
    for k in range(lattice.num_steps - 1, -1, -1):
        mean, cross = lattice.conditional(Y_next, k)
        Z = cross / lattice.dt
        g = np.asarray(generator(lattice.times[k], Z.reshape(-1, m)), dtype=float).reshape(mean.shape)
        Y_next = mean + check_finite(g, k, Z, "generator") * lattice.dt
        if store or k == 0:
            Ys.append(Y_next)
            Zs.append(Z)
        logger.debug("g-expectation slice %d done", k)
    Ys.reverse()
    Zs.reverse()
    if not store:
        Ys.append(terminal_values(lattice, terminal))
    return LatticeSolution(lattice, Ys, Zs)


def _ode_rhs(bundle: GeneratorBundle, cache: dict):
    """(t, Y) -> rho(t) Y + f(t, 0), memoizing f(t, 0) per time"""
    zero = np.zeros(bundle.model.brownian_dim)
    w = bundle.weights

    def rhs(t, y):
        if t not in cache:
            cache[t] = f_generator(bundle, t, zero)
        h_t = bundle.h(t)
        return (w.alpha / (w.alpha_bar * h_t)) * y + cache[t][0]

    return rhs


def _solve_ode(bundle: GeneratorBundle, steps: int) -> ValueReport:
    """
    Backward classical Runge-Kutta on the uniform grid t_k = k T / N for
    Y' = rho(t) Y + f(t, 0), Y(T) = 0
    """
    w = bundle.weights
    times = np.linspace(0.0, w.horizon, steps + 1)
    dt = w.horizon / steps
    cache = {}
    rhs = _ode_rhs(bundle, cache)
    Y = np.zeros(steps + 1)
    for k in range(steps - 1, -1, -1):
        # left limit at t_{k+1}: coefficients are right-continuous
        t_hi = float(np.nextafter(times[k + 1], times[k]))
        t_mid = times[k] + 0.5 * dt
        k1 = rhs(t_hi, Y[k + 1])
        k2 = rhs(t_mid, Y[k + 1] - 0.5 * dt * k1)
        k3 = rhs(t_mid, Y[k + 1] - 0.5 * dt * k2)
        k4 = rhs(times[k], Y[k + 1] - dt * k3)
        Y[k] = Y[k + 1] - dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        if not np.isfinite(Y[k]):
            raise NumericFaultError(f"value ODE diverged at t={times[k]}")

    zero = np.zeros(bundle.model.brownian_dim)
    grid_rows = [cache.get(t) or f_generator(bundle, t, zero) for t in times]
    h = bundle.h(times)
    h0 = float(h[0])
    return ValueReport(
        Y0=float(Y[0]), V0=w.alpha_bar * h0 * (np.log(w.initial_wealth) - float(Y[0])), h0=h0,
        mode="ode", convention=bundle.convention, steps=steps, times=times, Y=Y,
        f0=np.array([r[0] for r in grid_rows]), h=h, rho=w.alpha / (w.alpha_bar * h),
        pi=np.stack([r[1] for r in grid_rows[:-1]]), c=np.array([r[2] for r in grid_rows[:-1]]),
    )


def _solve_lattice(bundle: GeneratorBundle, steps: int, workers: int = 1) -> ValueReport:
    """
    Y_k = (E[Y_{k+1}] - f(t_k, Z_k) dt) / (1 + rho(t_k) dt)  with  Z_k = -E[Y_{k+1} dW] / dt,
    implicit in the linear term and explicit in f
    """
    w = bundle.weights
    m = bundle.model.brownian_dim
    lattice = Lattice(steps, w.horizon, m)
    Y_next = np.zeros(lattice.slice_shape(steps))
    Ys, Zs, pis, cs = [Y_next], [], [], []
    for k in range(steps - 1, -1, -1):
        t = lattice.times[k]
        mean, cross = lattice.conditional(Y_next, k)
        Z = -cross / lattice.dt
        values, pi_star, c_star = f_on_slice(bundle, (steps, k), t, Z.reshape(-1, m), workers)
        f_values = check_finite(values.reshape(mean.shape), k, Z, "value generator f")
        rho_k = w.alpha / (w.alpha_bar * bundle.h(t))
        Y_next = (mean - f_values * lattice.dt) / (1.0 + rho_k * lattice.dt)
        Ys.append(Y_next)
        Zs.append(Z)
        pis.append(pi_star.reshape(mean.shape + (-1,)))
        cs.append(np.full(mean.shape, c_star))
        logger.debug("value lattice slice %d done", k)
    for series in (Ys, Zs, pis, cs):
        series.reverse()

    solution = LatticeSolution(lattice, Ys, Zs, tag=f"value/{bundle.convention}")
    h = bundle.h(lattice.times)
    h0 = float(h[0])
    Y0 = solution.Y0
    return ValueReport(
        Y0=Y0, V0=w.alpha_bar * h0 * (np.log(w.initial_wealth) - Y0), h0=h0, mode="lattice",
        convention=bundle.convention, steps=steps, times=lattice.times, h=h,
        rho=w.alpha / (w.alpha_bar * h), pi=pis, c=cs, solution=solution,
    )


def solve_value_bsde(bundle: GeneratorBundle, steps: int, mode: str = DEFAULT_MODE,
                     workers: int = 1) -> ValueReport:
    """
    Solve dY = (rho Y + f(t, Z)) dt - Z dW, Y_T = 0, and report V0

    Args:
        mode: 'ode' (Z = 0, backward RK4), 'lattice', or 'auto', which picks the
            ODE because all coefficient processes are deterministic
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}' (expected one of {MODES})")
    if mode == "lattice":
        report = _solve_lattice(bundle, steps, workers)
    else:
        report = _solve_ode(bundle, steps)
    report.metadata.update({"convention": bundle.convention, "mode_requested": mode})
    logger.info("value BSDE solved: mode=%s N=%d Y0=%.10g V0=%.10g", report.mode, steps, report.Y0, report.V0)
    return report


def solve_with_refinement(bundle: GeneratorBundle, steps: int, mode: str = DEFAULT_MODE,
                          tol: float = 1e-4, workers: int = 1):
    """
    Solve at N and 2N

    Returns:
        (report at N, report at 2N, converged flag)
    """
    coarse = solve_value_bsde(bundle, steps, mode, workers)
    fine = solve_value_bsde(bundle, 2 * steps, mode, workers)
    converged = abs(fine.V0 - coarse.V0) <= tol
    if not converged:
        logger.warning("grid refinement not converged: V0(N=%d)=%.10g, V0(N=%d)=%.10g",
                       steps, coarse.V0, 2 * steps, fine.V0)
    return coarse, fine, converged


def extract_strategy(report: ValueReport) -> StrategyProcess:
    """Optimal (pi*, c*) as a strategy: time-indexed on the ODE path, node-indexed on the lattice"""
    if report.mode == "ode":
        return StrategyProcess.time_indexed(report.times, report.pi, report.c)
    return StrategyProcess(report.times, tuple(report.pi), tuple(report.c))
