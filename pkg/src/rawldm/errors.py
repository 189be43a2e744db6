"""Exception types shared across the package."""


class RawLDMError(Exception):
    pass


class ShapeError(RawLDMError, ValueError):
    """Operand extents are incompatible with the requested operation."""


class ConfigError(RawLDMError, ValueError):
    """A parameter or configuration value is outside its valid domain."""


class RangeError(RawLDMError, IndexError):
    """A step or index lies outside the permitted range."""


class NumericalError(RawLDMError, ArithmeticError):
    """NaN input or a singular computation."""


class ColorStateError(RawLDMError, ValueError):
    """An image plane is in the wrong color state for a pipeline stage."""


class MetadataError(RawLDMError, FileNotFoundError):
    """Raw container sidecar is missing or malformed."""


class CheckpointError(RawLDMError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found} does not match supported version {expected}")
        self.found = found
        self.expected = expected


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint tensors or config do not match the model being loaded."""
