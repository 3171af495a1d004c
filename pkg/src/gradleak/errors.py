"""Exception taxonomy shared across the package."""


class GradleakError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(GradleakError, ValueError):
    """Shapes of inputs do not line up."""


class ConfigError(GradleakError, ValueError):
    """A config object violates its declared invariants."""


class UnsupportedActivationError(GradleakError):
    """Operation needs a derivative the activation does not provide."""


class NoInformativeOrderError(GradleakError):
    """All Gaussian derivative moments of the activation vanish up to the
    searched order; the moment-based attack cannot use it."""


class DegenerateObservationError(GradleakError):
    """A defense destroyed the whole observation (e.g. every node dropped)."""


class DivergenceError(GradleakError):
    """An iterative rollout produced non-finite values."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class LayoutMismatchError(GradleakError):
    """Observations with different flattening layouts cannot be combined."""


class ProbeError(GradleakError):
    """Contraction probe is (nearly) orthogonal to the estimated subspace;
    resample it."""


class AttackStageError(GradleakError):
    """Wraps a failure inside the attack pipeline with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"attack stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
