"""
Constraint sets as finite unions of convex primitives, their images under
sigma, and the pointwise optimizers used by the value generator
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq, linprog, lsq_linear, minimize

from config import MEMBERSHIP_TOL, OPTIMIZER_GRAD_TOL, OPTIMIZER_MAX_ITER
from errors import (DomainViolationError, InfeasibleConsumptionError,
                    InfeasiblePortfolioError, InvalidSetError)

logger = logging.getLogger(__name__)


def _vector(value, dim: Optional[int] = None) -> np.ndarray:
    out = np.atleast_1d(np.asarray(value, dtype=float)).reshape(-1)
    if dim is not None and out.size == 1 and dim > 1:
        out = np.full(dim, out[0])
    return out


@dataclass(frozen=True, eq=False)
class WholeSpace:
    dim: int
    kind = "whole"

    def contains(self, x) -> bool:
        return True

    def interval(self) -> Tuple[float, float]:
        return -np.inf, np.inf

    def to_spec(self) -> dict:
        return {"type": "whole"}


@dataclass(frozen=True, eq=False)
class Box:
    """Coordinatewise bounds lo <= x <= hi (infinite bounds allowed)"""

    lo: np.ndarray
    hi: np.ndarray
    kind = "box"

    def __post_init__(self):
        lo, hi = _vector(self.lo), _vector(self.hi)
        if lo.size == 1 and hi.size > 1:
            lo = np.full(hi.size, lo[0])
        if hi.size == 1 and lo.size > 1:
            hi = np.full(lo.size, hi[0])
        if lo.shape != hi.shape:
            raise InvalidSetError("box bounds lo and hi must have the same length")
        if np.any(lo > hi):
            raise InvalidSetError(f"empty box: lo={lo.tolist()} exceeds hi={hi.tolist()}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def contains(self, x) -> bool:
        x = _vector(x)
        return bool(np.all(x >= self.lo - MEMBERSHIP_TOL) and np.all(x <= self.hi + MEMBERSHIP_TOL))

    def interval(self) -> Tuple[float, float]:
        return float(self.lo[0]), float(self.hi[0])

    def to_spec(self) -> dict:
        return {"type": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True, eq=False)
class Ball:
    center: np.ndarray
    radius: float
    kind = "ball"

    def __post_init__(self):
        object.__setattr__(self, "center", _vector(self.center))
        if not self.radius >= 0 or not np.isfinite(self.radius):
            raise InvalidSetError(f"ball radius must be finite and nonnegative, got {self.radius}")

    @property
    def dim(self) -> int:
        return self.center.size

    def contains(self, x) -> bool:
        return bool(np.linalg.norm(_vector(x) - self.center) <= self.radius + MEMBERSHIP_TOL)

    def interval(self) -> Tuple[float, float]:
        return float(self.center[0] - self.radius), float(self.center[0] + self.radius)

    def to_spec(self) -> dict:
        return {"type": "ball", "center": self.center.tolist(), "radius": float(self.radius)}


@dataclass(frozen=True, eq=False)
class Polytope:
    """Intersection of halfspaces {x : normals @ x <= offsets}"""

    normals: np.ndarray
    offsets: np.ndarray
    kind = "polytope"
    feasible_point: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        offsets = _vector(self.offsets)
        if normals.shape[0] != offsets.size:
            raise InvalidSetError("polytope needs one offset per normal")
        res = linprog(np.zeros(normals.shape[1]), A_ub=normals, b_ub=offsets,
                      bounds=[(None, None)] * normals.shape[1], method="highs")
        if res.status != 0:
            raise InvalidSetError(f"polytope is empty or unbounded in feasibility ({res.message})")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "feasible_point", np.asarray(res.x, dtype=float))

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    def contains(self, x) -> bool:
        return bool(np.all(self.normals @ _vector(x) <= self.offsets + MEMBERSHIP_TOL))

    def interval(self) -> Tuple[float, float]:
        lo, hi = -np.inf, np.inf
        for n, o in zip(self.normals[:, 0], self.offsets):
            if n > 0:
                hi = min(hi, o / n)
            elif n < 0:
                lo = max(lo, o / n)
        return float(lo), float(hi)

    def to_spec(self) -> dict:
        return {"type": "polytope", "normals": self.normals.tolist(), "offsets": self.offsets.tolist()}


@dataclass(frozen=True, eq=False)
class Singleton:
    at: np.ndarray
    kind = "point"

    def __post_init__(self):
        object.__setattr__(self, "at", _vector(self.at))

    @property
    def dim(self) -> int:
        return self.at.size

    def contains(self, x) -> bool:
        return bool(np.linalg.norm(_vector(x) - self.at) <= MEMBERSHIP_TOL)

    def interval(self) -> Tuple[float, float]:
        return float(self.at[0]), float(self.at[0])

    def to_spec(self) -> dict:
        return {"type": "point", "at": self.at.tolist()}


Primitive = Union[WholeSpace, Box, Ball, Polytope, Singleton]


def primitive_from_spec(spec: dict, dim: int) -> Primitive:
    """
    Build a primitive from its tagged mapping, e.g. ``{"type": "box", "lo": 0, "hi": 0.1}``

    Raises:
        InvalidSetError: unknown tag, missing keys or an empty primitive
    """
    kind = spec.get("type")
    expected = {"whole": set(), "box": {"lo", "hi"}, "ball": {"center", "radius"},
                "polytope": {"normals", "offsets"}, "point": {"at"}}
    if kind not in expected:
        raise InvalidSetError(f"unknown primitive type '{kind}' (expected one of {sorted(expected)})")
    keys = set(spec) - {"type"}
    if keys != expected[kind]:
        raise InvalidSetError(f"{kind} needs keys {sorted(expected[kind])}, got {sorted(keys)}")

    if kind == "whole":
        piece = WholeSpace(dim)
    elif kind == "box":
        piece = Box(_vector(spec["lo"], dim), _vector(spec["hi"], dim))
    elif kind == "ball":
        piece = Ball(_vector(spec["center"], dim), float(spec["radius"]))
    elif kind == "polytope":
        piece = Polytope(np.asarray(spec["normals"], dtype=float).reshape(-1, dim), spec["offsets"])
    else:
        piece = Singleton(_vector(spec["at"], dim))
    if piece.dim != dim:
        raise InvalidSetError(f"{kind} has dimension {piece.dim}, expected {dim}")
    return piece


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Closed set given as a finite union of convex primitives"""

    pieces: Tuple[Primitive, ...]
    dim: int

    def __post_init__(self):
        pieces = tuple(self.pieces)
        if not pieces:
            raise InvalidSetError("constraint set needs at least one piece")
        for piece in pieces:
            if piece.dim != self.dim:
                raise InvalidSetError(f"piece of dimension {piece.dim} in a set of dimension {self.dim}")
        object.__setattr__(self, "pieces", pieces)

    @classmethod
    def whole(cls, dim: int) -> "ConstraintSet":
        return cls((WholeSpace(dim),), dim)

    @classmethod
    def from_spec(cls, specs: Sequence[dict], dim: int) -> "ConstraintSet":
        if isinstance(specs, dict):
            specs = [specs]
        return cls(tuple(primitive_from_spec(s, dim) for s in specs), dim)

    def to_spec(self) -> list:
        return [piece.to_spec() for piece in self.pieces]

    def contains(self, x) -> bool:
        return any(piece.contains(x) for piece in self.pieces)

    def intervals(self) -> list:
        """Pieces as closed intervals; one-dimensional sets only"""
        if self.dim != 1:
            raise InvalidSetError("intervals() is only defined for one-dimensional sets")
        return [piece.interval() for piece in self.pieces]


@dataclass(frozen=True, eq=False)
class ImageSet:
    """sigma A = {pi sigma : pi in A} in R^m for a set A of row vectors in R^{1 x d}"""

    base: ConstraintSet
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if matrix.shape[0] != self.base.dim:
            raise InvalidSetError(f"sigma has {matrix.shape[0]} rows for a set of dimension {self.base.dim}")
        object.__setattr__(self, "matrix", matrix)

    @property
    def ambient_dim(self) -> int:
        return self.matrix.shape[1]


def _solve_piece(piece: Primitive, A: np.ndarray, p: np.ndarray) -> np.ndarray:
    """argmin over x in piece of |A x - p|^2 (A has full column rank)"""
    if isinstance(piece, Singleton):
        return piece.at.copy()
    if isinstance(piece, WholeSpace):
        return np.linalg.lstsq(A, p, rcond=None)[0]
    if isinstance(piece, Box):
        return _solve_box(piece, A, p)
    if isinstance(piece, Ball):
        return _solve_ball(piece, A, p)
    return _solve_polytope(piece, A, p)


def _solve_box(piece: Box, A: np.ndarray, p: np.ndarray) -> np.ndarray:
    x = piece.lo.copy()
    free = piece.lo < piece.hi
    if not free.any():
        return x
    if A.shape[0] == A.shape[1] and np.allclose(A, np.eye(A.shape[0])):
        return np.clip(p, piece.lo, piece.hi)
    # lsq_linear needs lo < hi strictly, so fixed coordinates are moved to the target
    residual_target = p - A[:, ~free] @ x[~free]
    # bvls wants at least as many rows as free columns
    method = "bvls" if A.shape[0] >= int(free.sum()) else "trf"
    res = lsq_linear(A[:, free], residual_target, bounds=(piece.lo[free], piece.hi[free]),
                     method=method, tol=1e-14)
    x[free] = res.x
    return x


def _solve_ball(piece: Ball, A: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Trust-region subproblem min |A u - q| s.t. |u| <= r with u = x - center"""
    q = p - A @ piece.center
    gram = A.T @ A
    eigvals, eigvecs = np.linalg.eigh(gram)
    if eigvals[0] <= 1e-14 * max(1.0, eigvals[-1]):
        return _solve_convex_slsqp(A, p, piece.center,
                                   [{"type": "ineq",
                                     "fun": lambda x: piece.radius ** 2 - np.sum((x - piece.center) ** 2),
                                     "jac": lambda x: -2.0 * (x - piece.center)}])
    rhs = eigvecs.T @ (A.T @ q)

    def norm_at(lam):
        return np.linalg.norm(rhs / (eigvals + lam))

    if norm_at(0.0) <= piece.radius or piece.radius == 0.0:
        u = eigvecs @ (rhs / eigvals) if piece.radius > 0 else np.zeros_like(piece.center)
        return piece.center + u
    upper = np.linalg.norm(rhs) / piece.radius
    lam = brentq(lambda v: norm_at(v) - piece.radius, 0.0, upper, xtol=1e-15, rtol=1e-14)
    return piece.center + eigvecs @ (rhs / (eigvals + lam))


def _solve_polytope(piece: Polytope, A: np.ndarray, p: np.ndarray) -> np.ndarray:
    constraints = [{"type": "ineq", "fun": lambda x: piece.offsets - piece.normals @ x,
                    "jac": lambda x: -piece.normals}]
    return _solve_convex_slsqp(A, p, piece.feasible_point, constraints)


def _solve_convex_slsqp(A, p, start, constraints) -> np.ndarray:
    res = minimize(lambda x: 0.5 * np.sum((A @ x - p) ** 2), start,
                   jac=lambda x: A.T @ (A @ x - p), constraints=constraints,
                   method="SLSQP", options={"ftol": 1e-15, "maxiter": 500})
    if not res.success:
        logger.warning("SLSQP projection did not converge: %s", res.message)
    return np.asarray(res.x, dtype=float)


def _pick(distances: Sequence[float]) -> int:
    """Index of the smallest distance; near-ties go to the lowest index"""
    distances = np.asarray(distances, dtype=float)
    best = float(np.min(distances))
    return int(np.flatnonzero(distances <= best + 1e-14 * max(1.0, best))[0])


def project_preimage(image: ImageSet, point) -> Tuple[np.ndarray, int]:
    """(pi, piece index) with pi sigma the nearest point of sigma A to ``point``"""
    point = _vector(point)
    if point.size != image.ambient_dim:
        raise InvalidSetError(f"point has dimension {point.size}, expected {image.ambient_dim}")
    A = image.matrix.T
    candidates = [_solve_piece(piece, A, point) for piece in image.base.pieces]
    distances = [float(np.sum((A @ x - point) ** 2)) for x in candidates]
    best = _pick(distances)
    return candidates[best], best


def project(image: ImageSet, point) -> Tuple[np.ndarray, int]:
    """
    Nearest point of sigma A to ``point`` and the index of the piece attaining it

    Ties are broken by the lowest piece index.
    """
    pi, index = project_preimage(image, point)
    return pi @ image.matrix, index


def distance_sq(image: ImageSet, point) -> float:
    """Squared Euclidean distance from ``point`` to sigma A (0 iff the point is in the set)"""
    nearest, _ = project(image, point)
    return float(np.sum((nearest - _vector(point)) ** 2))


def project_interval_images(image: ImageSet, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized projection for d = 1, where every piece is an interval and its
    image is a segment of the line spanned by sigma

    Args:
        points: shape (n, m)

    Returns:
        (pi, piece index), shapes (n,) and (n,)
    """
    a = image.matrix[0]
    points = np.atleast_2d(points)
    coordinate = points @ a / float(a @ a)
    best_pi = np.zeros(points.shape[0])
    best_dist = np.full(points.shape[0], np.inf)
    best_index = np.zeros(points.shape[0], dtype=int)
    for i, (lo, hi) in enumerate(image.base.intervals()):
        pi = np.clip(coordinate, lo, hi)
        dist = np.sum((pi[:, np.newaxis] * a - points) ** 2, axis=1)
        better = dist < best_dist - 1e-14 * np.maximum(1.0, best_dist)
        best_pi = np.where(better, pi, best_pi)
        best_dist = np.where(better, dist, best_dist)
        best_index = np.where(better, i, best_index)
    return best_pi, best_index


def argmax_consumption(cset: ConstraintSet, alpha: float, alpha_bar: float, h_t: float) -> Tuple[float, float]:
    """
    Exact maximizer of alpha ln c - alpha_bar h(t) c over the consumption set

    Each piece is an interval; the concave objective peaks at
    c_hat = alpha / (alpha_bar h), so the piece optimum is c_hat clamped to
    the piece. With alpha = 0 the cheapest feasible consumption wins.

    Returns:
        (c*, optimal value)
    """
    cost = alpha_bar * h_t
    best_c, best_value = None, -np.inf
    for lo, hi in cset.intervals():
        if alpha > 0:
            if hi <= 0:
                continue
            c = min(max(alpha / cost, lo), hi)
            value = alpha * np.log(c) - cost * c
        else:
            if hi < 0:
                continue
            c = max(lo, 0.0)
            value = -cost * c
        if best_c is None or value > best_value + 1e-15 * max(1.0, abs(best_value)):
            best_c, best_value = float(c), float(value)
    if best_c is None:
        raise InfeasibleConsumptionError(
            "consumption set contains no admissible rate (c > 0 required when alpha > 0)"
        )
    return best_c, best_value


def portfolio_objective(pi, sigma_t, theta_t, g_eval: Callable, scale_a: float, scale_b: float, z,
                        theta_sign: float = 1.0, ito_weight: float = 0.0) -> float:
    """phi(pi) = scale_b g(scale_a (z + pi sigma)) + theta_sign pi sigma theta + ito_weight/2 |pi sigma|^2"""
    exposure = _vector(pi) @ sigma_t
    return float(scale_b * g_eval(scale_a * (z + exposure)) + theta_sign * exposure @ theta_t
                 + 0.5 * ito_weight * exposure @ exposure)


def argmin_portfolio(aset: ConstraintSet, sigma_t, theta_t, g_eval: Callable, scale_a: float,
                     scale_b: float, z, theta_sign: float = 1.0, ito_weight: float = 0.0,
                     quadratic_coef: Optional[float] = None,
                     g_grad: Optional[Callable] = None) -> Tuple[np.ndarray, float]:
    """
    Minimize phi over the portfolio set, piece by piece

    Args:
        aset: Portfolio set A (row vectors in R^{1 x d})
        sigma_t, theta_t: Volatility (d, m) and market price of risk (m,)
        g_eval: y -> g(t, y)
        quadratic_coef: if g(y) = coef |y|^2, each piece problem is a projection
        g_grad: y -> a (sub)gradient of g(t, .), required for non-quadratic g

    Returns:
        (pi*, phi(pi*))
    """
    sigma_t = np.atleast_2d(np.asarray(sigma_t, dtype=float))
    theta_t = _vector(theta_t)
    z = _vector(z)
    image = ImageSet(aset, sigma_t)

    def phi(pi):
        return portfolio_objective(pi, sigma_t, theta_t, g_eval, scale_a, scale_b, z, theta_sign, ito_weight)

    if quadratic_coef is not None:
        curvature = 2.0 * quadratic_coef * scale_a ** 2 * scale_b
        total = curvature + ito_weight
        if total <= 0:
            raise InfeasiblePortfolioError("portfolio objective is not strictly convex")
        target = -(curvature * z + theta_sign * theta_t) / total
        pi_star, _ = project_preimage(image, target)
        return pi_star, phi(pi_star)

    if g_grad is None:
        raise InfeasiblePortfolioError("non-quadratic generator needs a gradient oracle")

    A = sigma_t.T
    results = []
    for piece in aset.pieces:
        start = _solve_piece(piece, A, -z)
        results.append(_projected_descent(piece, start, sigma_t, theta_t, g_eval, g_grad,
                                          scale_a, scale_b, z, theta_sign, ito_weight))
    values = [v for _, v in results]
    best = _pick(values) if np.all(np.isfinite(values)) else int(np.argmin(values))
    return results[best]


def project_onto_piece(piece: Primitive, x: np.ndarray) -> np.ndarray:
    if isinstance(piece, WholeSpace):
        return x
    if isinstance(piece, Box):
        return np.clip(x, piece.lo, piece.hi)
    if isinstance(piece, Ball):
        offset = x - piece.center
        norm = np.linalg.norm(offset)
        return x if norm <= piece.radius else piece.center + offset * (piece.radius / norm)
    return _solve_piece(piece, np.eye(x.size), x)


def _projected_descent(piece, start, sigma_t, theta_t, g_eval, g_grad, scale_a, scale_b, z,
                       theta_sign, ito_weight):
    """Projected gradient descent with Armijo backtracking on one convex piece"""
    if isinstance(piece, Singleton):
        return start, portfolio_objective(start, sigma_t, theta_t, g_eval, scale_a, scale_b, z,
                                          theta_sign, ito_weight)

    def phi(pi):
        return portfolio_objective(pi, sigma_t, theta_t, g_eval, scale_a, scale_b, z, theta_sign, ito_weight)

    def grad(pi):
        exposure = pi @ sigma_t
        outer = scale_b * scale_a * g_grad(scale_a * (z + exposure)) + theta_sign * theta_t + ito_weight * exposure
        return sigma_t @ outer

    pi = start
    value = phi(pi)
    if not np.isfinite(value):
        raise DomainViolationError(f"generator is infinite at the starting portfolio {pi.tolist()}")
    step = 1.0
    for _ in range(OPTIMIZER_MAX_ITER):
        gradient = grad(pi)
        for _ in range(60):
            candidate = project_onto_piece(piece, pi - step * gradient)
            move = candidate - pi
            new_value = phi(candidate)
            if new_value <= value + gradient @ move + (0.5 / step) * (move @ move):
                break
            step *= 0.5
        mapping_norm = np.linalg.norm(move) / step
        pi, value = candidate, new_value
        if mapping_norm <= OPTIMIZER_GRAD_TOL:
            return pi, phi(pi)
        step *= 2.0
    logger.warning("portfolio optimizer reached %d iterations (gradient mapping %.3g)",
                   OPTIMIZER_MAX_ITER, mapping_norm)
    return pi, phi(pi)
