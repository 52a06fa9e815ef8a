"""Exception types shared across the package."""


class GSConvError(Exception):
    """Base class; the CLI maps every subclass to a one-line error and exit 1."""

    prefix = "error"


class ShapeError(GSConvError, ValueError):
    prefix = "shape-error"


class BoundsError(GSConvError, IndexError):
    prefix = "bounds-error"


class ConfigError(GSConvError, ValueError):
    prefix = "config-error"


class StateError(GSConvError, RuntimeError):
    prefix = "state-error"


class FormatError(GSConvError, ValueError):
    prefix = "format-error"
