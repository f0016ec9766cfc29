"""
Piecewise-constant (right-continuous) coefficient processes with exact integrals
"""
from dataclasses import dataclass
from typing import Iterator, Tuple, Union

import numpy as np


@dataclass(frozen=True, eq=False)
class PiecewiseConstant:
    """
    Right-continuous step function of time.

    ``values[i]`` holds on ``[breaks[i-1], breaks[i])`` with ``breaks[-1] = 0``
    and ``breaks[K] = +inf``; values may be scalars, vectors or matrices.
    """

    breaks: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        breaks = np.asarray(self.breaks, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.shape[0] != breaks.size + 1:
            raise ValueError(
                f"need {breaks.size + 1} values for {breaks.size} breakpoints, got {values.shape[0]}"
            )
        if breaks.size and np.any(np.diff(breaks) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("coefficient values must be finite")
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value) -> "PiecewiseConstant":
        value = np.asarray(value, dtype=float)
        return cls(np.empty(0), value[np.newaxis, ...])

    @classmethod
    def from_spec(cls, spec: Union[float, list, dict]) -> "PiecewiseConstant":
        """Build from a constant or from ``{"times": [...], "values": [...]}``"""
        if isinstance(spec, dict):
            return cls(np.asarray(spec["times"], dtype=float), np.asarray(spec["values"], dtype=float))
        return cls.constant(spec)

    def to_spec(self) -> Union[float, list, dict]:
        if self.breaks.size == 0:
            return self.values[0].tolist()
        return {"times": self.breaks.tolist(), "values": self.values.tolist()}

    @property
    def value_shape(self) -> Tuple[int, ...]:
        return self.values.shape[1:]

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    def at(self, t) -> np.ndarray:
        """Value at time(s) t; vectorized over t"""
        idx = np.searchsorted(self.breaks, t, side="right")
        return self.values[idx]

    def pieces(self, a: float, b: float) -> Iterator[Tuple[float, float, np.ndarray]]:
        """Yield (start, end, value) for the pieces covering [a, b]"""
        if b <= a:
            return
        edges = self.breaks[(self.breaks > a) & (self.breaks < b)]
        grid = np.concatenate(([a], edges, [b]))
        for lo, hi in zip(grid[:-1], grid[1:]):
            yield float(lo), float(hi), self.at(lo)

    def integral(self, a: float, b: float) -> float:
        """Exact integral of a scalar step function over [a, b]"""
        if b < a:
            return -self.integral(b, a)
        return float(sum(value * (hi - lo) for lo, hi, value in self.pieces(a, b)))

    def exp_integral(self, a: float, b: float, t0: float = 0.0) -> float:
        """
        Exact value of  int_a^b exp(-int_t0^u r(s) ds) du  for a scalar rate r >= 0

        Args:
            a, b: Integration bounds (a <= b)
            t0: Origin of the inner integral
        """
        total = 0.0
        for lo, hi, rate in self.pieces(a, b):
            start = np.exp(-self.integral(t0, lo))
            rate = float(rate)
            length = hi - lo
            if rate == 0.0:
                total += start * length
            else:
                total += start * (-np.expm1(-rate * length)) / rate
        return float(total)
