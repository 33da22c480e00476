class WsaError(Exception):
    """Base class for all package errors."""


class ShapeError(WsaError, ValueError):
    """Tensor shapes or channel counts are incompatible with an operation."""


class ConfigError(WsaError, ValueError):
    """A configuration record violates its invariants."""


class GradCheckError(WsaError):
    """The gradient harness was asked to do something it cannot."""


class WavefieldError(WsaError, ValueError):
    """A synthesis request or measurement is ill-posed."""


class BScanFormatError(WsaError, ValueError):
    """A BSCAN1 file or its sidecar is malformed."""
