"""Exception types shared across the package."""


class HetanomError(Exception):
    """Base class for all package errors."""


class ParseError(HetanomError, ValueError):
    """A file could not be parsed (carries the offending line in the message)."""


class SchemaError(HetanomError, ValueError):
    """A file header or column layout does not match the declared schema."""


class ValidationError(HetanomError, ValueError):
    """Data violates a dataset invariant (duplicate ids, bad labels, ...)."""


class SplitError(HetanomError, ValueError):
    """A requested split would leave a present label class empty in one part."""


class CapacityError(HetanomError, ValueError):
    """Not enough samples for the requested operation (e.g. k > |normals|)."""


class ShapeError(HetanomError, ValueError):
    """Dimension mismatch between feature vectors or network inputs."""


class ConfigurationError(HetanomError, ValueError):
    """Invalid configuration value; message names the offending field."""


class ContractError(HetanomError, ValueError):
    """A caller violated an operation precondition."""


class NumericError(HetanomError, ArithmeticError):
    """A computation produced a non-finite value."""


class UndefinedMetricError(HetanomError, ValueError):
    """A metric is undefined for the given input (e.g. single-class AUC)."""


class CheckpointError(HetanomError, ValueError):
    """A checkpoint file is malformed or from an unknown format version."""


class ReplayError(HetanomError, RuntimeError):
    """A replayed run did not reproduce the recorded artifacts."""
