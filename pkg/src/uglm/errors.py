"""Exception taxonomy shared by all uglm modules."""


class UglmError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(UglmError):
    """Operand shapes are incompatible."""


class DegenerateInputError(UglmError):
    """An input is numerically degenerate (e.g. a zero-norm row)."""


class InvalidParameterError(UglmError):
    """A scalar parameter is outside its valid range."""


class NumericError(UglmError):
    """A computation produced a non-finite value."""


class ContractError(UglmError):
    """A caller violated an operation's precondition."""


class EmptyDataError(UglmError):
    """An operation received no data to work on."""


class ParseError(UglmError):
    """A file could not be parsed; message carries path and line number."""


class ValidationError(UglmError):
    """Parsed data violates a dataset invariant."""


class CheckpointError(UglmError):
    """Base class for checkpoint container errors."""


class CheckpointFormatError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class UnsupportedVersionError(CheckpointError):
    """The container version is newer than this reader supports."""


class TruncatedFileError(CheckpointError):
    """The file ends before the declared structure does."""


class ChecksumError(CheckpointError):
    """The payload does not match its integrity checksum."""


class GradientCheckError(UglmError):
    """An analytic gradient disagrees with the finite-difference oracle."""
