"""Exception types shared across the package."""


class BridgeMRIError(Exception):
    """Base class for all package errors."""


class ShapeError(BridgeMRIError):
    """Array shapes do not conform to an operation's shape rule."""


class ConfigError(BridgeMRIError):
    """Invalid or inconsistent configuration value."""


class DataError(BridgeMRIError):
    """Problem with stored data: missing files, bad magic, CRC mismatch."""


class NumericsError(BridgeMRIError):
    """Non-finite values where finite ones are required (NaN loss/grads)."""
