"""Exception types shared across the package."""


class SggvError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(SggvError):
    """Invalid architecture, strategy, or experiment configuration."""


class InputError(SggvError):
    """Runtime data does not match the declared shapes or ranges."""


class NumericalError(SggvError):
    """A forward/backward pass produced NaN or Inf; the step must abort."""


class DataLoadError(SggvError):
    """A dataset folder or checkpoint file could not be read."""


class EvaluationError(SggvError):
    """Evaluation was requested on an empty or malformed split."""
