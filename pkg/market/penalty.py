"""
Convex penalty integrand h and its Legendre-Fenchel conjugate h*

All penalty kinds are radial, h(x) = H(|x|) with H convex, nondecreasing and
H(0) = 0, so the conjugate reduces to a one-dimensional problem along the ray
of y:  h*(y) = sup_r ( r |y| - H(r) ).
"""
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.optimize import isotonic_regression, minimize_scalar

from config import CONJUGATE_XTOL, GROWTH_CHECK_POINTS, GROWTH_CHECK_RADIUS
from errors import UnboundedConjugateError

logger = logging.getLogger(__name__)

KINDS = ("quadratic", "norm", "tabulated")


@dataclass(frozen=True, eq=False)
class PenaltySpec:
    """
    Penalty integrand h on R^dim.

    quadratic: h(x) = w/2 |x|^2;  norm: h(x) = |x|;  tabulated: piecewise-linear
    convex profile on a radial grid, extended beyond the last radius by
    H_last + s_last (r - r_last) + kappa1 (r^2 - r_last^2).
    h = +inf outside the ball of radius ``domain_radius``.
    """

    kind: str
    dim: int
    weight: float = 1.0
    kappa1: float = 0.0
    kappa2: float = 0.0
    domain_radius: float = np.inf
    radii: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown penalty kind '{self.kind}' (expected one of {KINDS})")
        if self.dim < 1:
            raise ValueError("penalty dimension must be positive")
        if self.kappa1 < 0 or self.kappa2 < 0:
            raise ValueError("growth constants kappa1, kappa2 must be nonnegative")
        if not self.domain_radius > 0:
            raise ValueError("domain_radius must be positive")
        if self.kind == "quadratic" and not self.weight > 0:
            raise ValueError("quadratic penalty weight must be positive")
        if self.kind == "tabulated":
            if self.radii is None or self.values is None:
                raise ValueError("tabulated penalty needs radii and values")
            radii, values = repair_convexity(self.radii, self.values)
            object.__setattr__(self, "radii", radii)
            object.__setattr__(self, "values", values)

    @property
    def is_entropic(self) -> bool:
        """h = 1/2 |x|^2 on the whole space"""
        return self.kind == "quadratic" and self.weight == 1.0 and np.isinf(self.domain_radius)

    @property
    def has_finite_conjugate(self) -> bool:
        if np.isfinite(self.domain_radius):
            return True
        return self.kind == "quadratic" or (self.kind == "tabulated" and self.kappa1 > 0)

    def profile(self, r) -> np.ndarray:
        """Radial profile H(r), +inf beyond the domain radius"""
        r = np.asarray(r, dtype=float)
        if self.kind == "quadratic":
            out = 0.5 * self.weight * r ** 2
        elif self.kind == "norm":
            out = r.copy()
        else:
            r_last, h_last = self.radii[-1], self.values[-1]
            s_last = (self.values[-1] - self.values[-2]) / (self.radii[-1] - self.radii[-2])
            inside = np.interp(r, self.radii, self.values)
            beyond = h_last + s_last * (r - r_last) + self.kappa1 * (r ** 2 - r_last ** 2)
            out = np.where(r <= r_last, inside, beyond)
        return np.where(r <= self.domain_radius, out, np.inf)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "kappa1": self.kappa1, "kappa2": self.kappa2}
        if self.kind == "quadratic":
            out["weight"] = self.weight
        if np.isfinite(self.domain_radius):
            out["domain_radius"] = self.domain_radius
        if self.kind == "tabulated":
            out["radii"] = self.radii.tolist()
            out["values"] = self.values.tolist()
        return out


@dataclass(frozen=True)
class GrowthReport:
    ok: bool
    kappa1_observed: float
    kappa2_observed: float
    first_violation_radius: Optional[float]


def repair_convexity(radii, values):
    """
    Make a sampled radial profile convex, nondecreasing and zero at the origin.

    Slopes between samples are pooled (weighted isotonic regression,
    pool-adjacent-violators) and clipped at zero, then re-integrated.
    """
    radii = np.asarray(radii, dtype=float).reshape(-1)
    values = np.asarray(values, dtype=float).reshape(-1)
    if radii.size < 2 or radii.size != values.size:
        raise ValueError("tabulated penalty needs at least two (radius, value) rows")
    if radii[0] != 0.0 or values[0] != 0.0:
        raise ValueError("tabulated penalty must start at radius 0 with value 0")
    if np.any(np.diff(radii) <= 0):
        raise ValueError("tabulated radii must be strictly increasing")
    if not np.all(np.isfinite(values)):
        raise ValueError("tabulated values must be finite")

    widths = np.diff(radii)
    slopes = np.diff(values) / widths
    pooled = isotonic_regression(slopes, weights=widths, increasing=True).x
    pooled = np.maximum(pooled, 0.0)
    if not np.allclose(pooled, slopes):
        logger.warning("tabulated penalty repaired to a convex nondecreasing profile")
    repaired = np.concatenate(([0.0], np.cumsum(pooled * widths)))
    return radii, repaired


def load_tabulated_csv(path: str, dim: int, kappa1: float = 0.0, kappa2: float = 0.0,
                       domain_radius: float = np.inf) -> PenaltySpec:
    """
    Load a tabulated penalty from a two-column CSV (radius, value)

    Args:
        path: CSV file; a header row "radius,value" is optional
        dim: Ambient dimension m of the penalty argument
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"tabulated penalty file not found: {path}")
    df = pd.read_csv(path)
    if not {"radius", "value"}.issubset(df.columns):
        df = pd.read_csv(path, header=None).iloc[:, :2]
        df.columns = ["radius", "value"]
    return PenaltySpec("tabulated", dim, kappa1=kappa1, kappa2=kappa2, domain_radius=domain_radius,
                       radii=df["radius"].to_numpy(float), values=df["value"].to_numpy(float))


def _norms(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return np.linalg.norm(np.atleast_1d(y), axis=-1)


def evaluate_h(spec: PenaltySpec, eta) -> np.ndarray:
    """h(eta) >= 0, +inf outside the effective domain; vectorized over leading axes"""
    return spec.profile(_norms(eta))


def _closed_form_conjugate(spec: PenaltySpec, s: np.ndarray) -> np.ndarray:
    R = spec.domain_radius
    if spec.kind == "quadratic":
        w = spec.weight
        if np.isinf(R):
            return s ** 2 / (2.0 * w)
        return np.where(s <= w * R, s ** 2 / (2.0 * w), R * s - 0.5 * w * R ** 2)
    # norm: indicator of the unit ball when the domain is unbounded
    if np.isinf(R):
        return np.where(s <= 1.0, 0.0, np.inf)
    return np.maximum(0.0, R * (s - 1.0))


def _search_radius(spec: PenaltySpec, s: float) -> float:
    """Upper bound on the maximizing radius implied by the growth condition"""
    if spec.kappa1 > 0:
        bound = (s + np.sqrt(s ** 2 + 4.0 * spec.kappa1 * spec.kappa2)) / (2.0 * spec.kappa1)
        return float(min(bound, spec.domain_radius))
    if np.isfinite(spec.domain_radius):
        return float(spec.domain_radius)
    raise UnboundedConjugateError(
        "numeric conjugation needs kappa1 > 0 or a finite domain_radius"
    )


def _ray_search(spec: PenaltySpec, s: float):
    """Maximize r s - H(r) over r in [0, r_max]; returns (value, r*)"""
    r_max = _search_radius(spec, s)
    if r_max == 0.0:
        return 0.0, 0.0
    result = minimize_scalar(lambda r: float(spec.profile(r)) - r * s, bounds=(0.0, r_max),
                             method="bounded", options={"xatol": CONJUGATE_XTOL})
    candidates = [0.0, float(result.x), r_max]
    if spec.kind == "tabulated":
        # the maximum of a concave piecewise-linear objective sits on a knot
        candidates.extend(spec.radii[spec.radii <= r_max].tolist())
    objective = [r * s - float(spec.profile(r)) for r in candidates]
    best = int(np.argmax(objective))
    return objective[best], candidates[best]


def numeric_conjugate(spec: PenaltySpec, y) -> np.ndarray:
    """h*(y) by bounded golden-section/parabolic search along the ray of y"""
    s = _norms(y)
    flat = s.reshape(-1)
    out = np.array([_ray_search(spec, float(v))[0] for v in flat])
    return out.reshape(s.shape)


def conjugate(spec: PenaltySpec, y) -> np.ndarray:
    """
    h*(y) = sup_x { <y, x> - h(x) }

    Closed form for quadratic and norm kinds, numeric otherwise.
    +inf is returned where the supremum is unbounded.
    """
    s = _norms(y)
    if spec.kind in ("quadratic", "norm"):
        return _closed_form_conjugate(spec, s)
    return numeric_conjugate(spec, y)


def conjugate_argmax(spec: PenaltySpec, y) -> np.ndarray:
    """
    A maximizer x*(y) of <y, x> - h(x), i.e. a subgradient of h* at y

    Raises:
        UnboundedConjugateError: where h*(y) = +inf
    """
    y = np.asarray(y, dtype=float)
    s = _norms(y)
    if spec.kind == "quadratic":
        radius = np.minimum(s / spec.weight, spec.domain_radius)
    elif spec.kind == "norm":
        if np.isinf(spec.domain_radius) and np.any(s > 1.0):
            raise UnboundedConjugateError("norm penalty conjugate is infinite outside the unit ball")
        radius = np.where(s > 1.0, spec.domain_radius, 0.0)
    else:
        radius = np.array([_ray_search(spec, float(v))[1] for v in s.reshape(-1)]).reshape(s.shape)
    radius = np.asarray(radius, dtype=float)
    s = np.asarray(s, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        direction = np.where(s[..., np.newaxis] > 0, y / s[..., np.newaxis], 0.0)
    return radius[..., np.newaxis] * direction


def check_growth(spec: PenaltySpec, radius: float = GROWTH_CHECK_RADIUS,
                 points: int = GROWTH_CHECK_POINTS) -> GrowthReport:
    """
    Check h(x) >= kappa1 |x|^2 - kappa2 on a radial grid up to ``radius``

    Returns the tightest constants seen on the grid: the smallest kappa2 that
    works with the declared kappa1, and the largest kappa1 that works with the
    declared kappa2.
    """
    r = np.linspace(0.0, radius, points)
    H = spec.profile(r)
    finite = np.isfinite(H)
    slack = H - (spec.kappa1 * r ** 2 - spec.kappa2)
    violated = finite & (slack < -1e-12)
    kappa2_observed = float(max(0.0, np.max(np.where(finite, spec.kappa1 * r ** 2 - H, 0.0))))
    positive = finite & (r > 0)
    kappa1_observed = float(np.min((H[positive] + spec.kappa2) / r[positive] ** 2)) if positive.any() else np.inf
    first = float(r[violated][0]) if violated.any() else None
    return GrowthReport(ok=not violated.any(), kappa1_observed=kappa1_observed,
                        kappa2_observed=kappa2_observed, first_violation_radius=first)
