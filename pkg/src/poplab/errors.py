"""Exception taxonomy shared across the package."""


class PopError(Exception):
    """Base class for all package errors."""


class ContractViolation(PopError):
    """An operation was called with inputs that break its contract
    (shape mismatch, non-scalar loss, missing branch, ...)."""


class ParameterError(PopError):
    """A parameter value is outside its documented range."""


class NumericError(PopError):
    """A computation produced non-finite values."""


class GenerationError(PopError):
    """Scenario/dataset generation was asked for an infeasible configuration."""


class ConfigurationError(PopError):
    """A run configuration is incomplete or inconsistent."""


class CheckpointVersionError(PopError):
    """A checkpoint file declares an unsupported format version."""

    def __init__(self, found: int, supported: int):
        super().__init__(
            f"checkpoint format_version {found} is not supported "
            f"(this build reads version {supported})"
        )
        self.found = found
        self.supported = supported
