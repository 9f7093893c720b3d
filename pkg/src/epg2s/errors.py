"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file does not follow the expected on-disk layout."""


class ShapeError(ValueError):
    """Array dimensions disagree with the expected contract."""


class ManifestError(ValueError):
    """The corpus manifest is malformed (duplicate ids, bad rows)."""


class InputError(ValueError):
    """A model received an unusable combination of inputs."""


class MetricError(ValueError):
    """A metric cannot be computed for the given signals."""


class AdapterError(RuntimeError):
    """An external tool produced output that could not be parsed."""


class ConfigError(ValueError):
    """An experiment configuration is missing something it needs."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
