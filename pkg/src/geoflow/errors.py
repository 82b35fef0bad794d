"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit with 2,
numeric aborts with 3 and I/O failures with 4.
"""


class GeoflowError(Exception):
    """Base class for all package errors."""


class ValidationError(GeoflowError, ValueError):
    """Bad configuration, bad arguments or violated preconditions."""


class ShapeError(ValidationError):
    """Operands do not conform to an operation's algebraic rule."""


class NonFiniteError(GeoflowError, FloatingPointError):
    """A computation produced NaN or Inf."""


class CheckpointError(ValidationError):
    """A checkpoint file is corrupt, truncated or incompatible."""


class TrainingAborted(NonFiniteError):
    """Raised when a training step hits a non-finite value.

    Carries the step index and a copy of the parameters from before the
    failing step so the caller can persist them.
    """

    def __init__(self, step, params, cause):
        super().__init__(f"training aborted at step {step}: {cause}")
        self.step = step
        self.params = params
        self.cause = cause
