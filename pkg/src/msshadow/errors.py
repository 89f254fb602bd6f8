"""Exception types shared across the library."""


class ShadowingError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(ShadowingError):
    """A vector or block stack has the wrong shape for the operation."""


class DivergenceError(ShadowingError):
    """Time integration produced a non-finite state.

    The offending step index is stored in ``step``.
    """

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class DegenerateProjectorError(ShadowingError):
    """The flow vector vanished; the transverse projector is undefined."""


class BreakdownError(ShadowingError):
    """An iterative method produced an unusable vector.

    ``iteration`` records where the breakdown happened.
    """

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"breakdown at iteration {iteration}")


class ConfigError(ShadowingError):
    """An experiment configuration is invalid or inconsistent."""
