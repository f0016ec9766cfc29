"""
Exception hierarchy for the robust log-utility solver

Every error carries the CLI exit code it maps to:
0 ok, 2 config, 3 solver, 4 verification failure.
"""
from typing import Optional, Sequence


class RobustLogError(Exception):
    """Base class for all solver errors"""

    exit_code = 1


class ConfigError(RobustLogError):
    """Invalid problem description; names the offending field path"""

    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class LatticeDimensionError(ConfigError):
    """Lattice workflows are capped at m <= 3 Brownian factors and d <= 3 assets"""


class SolverError(RobustLogError):
    exit_code = 3


class CoefficientDegeneracyError(SolverError):
    """sigma * sigma^T is singular at some time"""


class DomainViolationError(SolverError):
    """A generator returned +infinity at an encountered lattice point"""

    def __init__(self, message: str, slice_index: Optional[int] = None,
                 node: Optional[Sequence[int]] = None, z: Optional[Sequence[float]] = None):
        self.slice_index = slice_index
        self.node = None if node is None else tuple(int(i) for i in node)
        self.z = None if z is None else tuple(float(v) for v in z)
        if slice_index is not None:
            message = f"{message} (k={slice_index}, node={self.node}, z={self.z})"
        super().__init__(message)


class NumericFaultError(SolverError):
    """NaN produced during evaluation"""


class InfeasibleConsumptionError(SolverError):
    pass


class InfeasiblePortfolioError(SolverError):
    pass


class InvalidSetError(SolverError):
    pass


class UnboundedConjugateError(SolverError):
    """Numeric conjugation needs kappa1 > 0 (or a finite domain radius)"""


class ClosedFormInapplicableError(SolverError):
    pass


class StepSizeError(SolverError):
    """Branch reweighting left [0, 1]; more lattice steps are needed"""


class LatticeMismatchError(SolverError):
    pass


class InadmissibleStrategyError(SolverError):
    pass


class VerificationError(RobustLogError):
    exit_code = 4
