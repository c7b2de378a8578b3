"""Exception types shared across the package."""


class IfwmError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(IfwmError, ValueError):
    """Spatial extents or shapes do not fit the requested operation."""


class ChannelCountError(GeometryError):
    """Channel counts of an input do not match the operation's parameters."""


class ContractError(IfwmError, ValueError):
    """An argument violates an operation's contract (not a shape issue)."""


class ConfigError(IfwmError, ValueError):
    """Invalid configuration value or file."""


class DataError(IfwmError, ValueError):
    """Malformed data: out-of-range labels, bad raster files, non-finite values."""


class CheckpointError(IfwmError, ValueError):
    """Checkpoint does not match the network it is loaded into."""


class DivergedError(IfwmError, RuntimeError):
    """Training produced a non-finite loss."""
