"""Exception hierarchy shared across the package.

Every error class carries a distinct process exit code so the CLI can
report failure categories to calling scripts.
"""


class DsnormError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DimensionError(DsnormError):
    """Tensor shapes are incompatible with the requested operation."""

    exit_code = 3


class ParameterError(DsnormError):
    """An argument value is outside its valid range."""

    exit_code = 4


class ConfigurationError(DsnormError):
    """A model, layer, or experiment configuration is invalid."""

    exit_code = 5


class RoutingError(DsnormError):
    """A domain identifier cannot be routed to a normalization branch."""

    exit_code = 6


class ContractViolationError(DsnormError):
    """A runtime precondition was violated (degenerate batch, mixed-domain
    batch, double backward, and similar misuse)."""

    exit_code = 7


class IngestionError(DsnormError):
    """A dataset file or manifest failed validation during loading."""

    exit_code = 8


class SplitError(DsnormError):
    """The dataset cannot be split into the requested folds."""

    exit_code = 9


class LeakageError(DsnormError):
    """A held-out subject leaked into training state."""

    exit_code = 10


class MetricUndefinedError(DsnormError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""

    exit_code = 11
