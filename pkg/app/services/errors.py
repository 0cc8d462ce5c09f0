# app/services/errors.py
"""Exception types shared by the dispatch stack.

Every error subclasses the closest built-in so that callers which only care
about "bad input" or "runtime failure" can keep catching ValueError /
RuntimeError.
"""


class Sa2coError(Exception):
    """Base class for all domain errors"""


class ConfigurationError(Sa2coError, ValueError):
    """Invalid configuration, device placement or missing artifact"""


class TopologyError(ConfigurationError):
    """Network is not a connected radial tree"""


class IngestionError(Sa2coError, ValueError):
    """Time-series file rejected while loading"""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ContractViolation(Sa2coError, ValueError):
    """A caller broke an operation precondition"""


class ShapeError(ContractViolation):
    """Array shapes do not chain"""


class StaleCacheError(ContractViolation):
    """Backward pass called with a cache from different parameters"""


class EnvironmentDoneError(ContractViolation):
    """step() called on a finished episode"""


class BufferUnderfilledError(ContractViolation):
    """Replay buffer holds fewer transitions than requested"""


class SolverError(Sa2coError, RuntimeError):
    """Numerical solver failed (e.g. singular Jacobian)"""


class NonConvergedError(SolverError):
    """A non-converged power-flow result was used where a solution is required"""


class NonFiniteGradientError(Sa2coError, RuntimeError):
    """Optimizer refused a gradient containing NaN/inf"""


class PolicyFault(Sa2coError, RuntimeError):
    """Policy head produced non-finite output"""


class ReadinessError(Sa2coError, RuntimeError):
    """Security-assessment model used before it is ready"""


class TrainingFault(Sa2coError, RuntimeError):
    """Training diverged or cannot continue"""


class DispatchInfeasibleError(Sa2coError, RuntimeError):
    """Safe-dispatch relaxation reported infeasible"""


class HardFault(Sa2coError, RuntimeError):
    """Repair could not evaluate a single trial"""
