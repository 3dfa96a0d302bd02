"""Exception hierarchy shared by every layer of the stack."""


class DlisError(Exception):
    """Base class for all errors raised by :mod:`dlis`."""


class ShapeError(DlisError, ValueError):
    """Operand extents are incompatible.

    ``layer_index`` is set when the mismatch was found while walking a
    network, so callers can report where validation failed.
    """

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class GeometryError(ShapeError):
    """Convolution or pooling window does not fit the input."""


class ConfigError(DlisError, ValueError):
    """Invalid execution, schedule or sweep configuration."""


class ChannelPruneError(DlisError, ValueError):
    """A channel removal would break the network structure."""


class ModelFormatError(DlisError):
    """Malformed model file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(DlisError):
    """Dataset files are missing, truncated or inconsistent."""


class DeterminismError(DlisError):
    """Outputs differed between runs that must be bitwise identical."""
