"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ValueError):
    """Tensor shapes do not chain."""


class InputError(ValueError):
    """Input data outside the admissible domain (e.g. probability > 1)."""


class ConfigError(ValueError):
    """Invalid estimator or experiment configuration."""


class CalibrationError(RuntimeError):
    """Intercept search failed to hit the requested rates."""

    def __init__(self, message, achieved_ctr=None, achieved_cvr=None):
        super().__init__(message)
        self.achieved_ctr = achieved_ctr
        self.achieved_cvr = achieved_cvr


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class UndefinedMetricError(ValueError):
    """A ranking metric is undefined for the given labels."""
