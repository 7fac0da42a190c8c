"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """An operator argument is out of its valid range."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class EvaluationError(RuntimeError):
    """A function under gradient check returned a non-finite value."""


class AnnotationError(ValueError):
    """Keypoint or label annotations are inconsistent."""


class ConfigurationError(ValueError):
    """A model, geometry or experiment configuration is invalid."""


class InputError(ValueError):
    """Metric inputs are malformed (e.g. a prediction without a score)."""


class SplitError(ValueError):
    """A dataset cannot be split as requested."""


class CoverageError(ValueError):
    """A class required by a report has no test samples."""


class PartUnavailableError(LookupError):
    """The requested part was not detected in the sample."""


class TrainingError(RuntimeError):
    """Training diverged.

    ``checkpoint`` holds the last parameter snapshot whose loss was finite.
    """

    def __init__(self, message, checkpoint=None, epoch=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch
