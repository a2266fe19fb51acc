"""Exception hierarchy shared across the package."""


class C2Error(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(C2Error):
    """Operands have incompatible shapes; the message names both."""


class ContractError(C2Error):
    """A documented precondition was violated by the caller."""


class DegenerateInputError(C2Error):
    """Input is structurally valid but has no usable content (e.g. a fully
    masked attention row, or a sequence with no real tokens)."""


class NumericDegeneracyError(C2Error):
    """A computation hit a value it cannot handle, such as normalizing a
    zero-norm row."""


class TemplateLookupError(C2Error, KeyError):
    """No prompt template is registered for the requested task."""


class DataFormatError(C2Error):
    """A data file is malformed; the message carries file and line."""


class ConfigError(C2Error):
    """A config file is missing a key or holds an invalid value; the message
    names the offending field path."""


class CheckpointError(C2Error):
    """A checkpoint file is malformed or incompatible with the model."""


class TrainingDivergedError(C2Error):
    """Training produced a non-finite loss; the message names the step."""
