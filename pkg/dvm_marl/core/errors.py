"""Exception hierarchy for the DVM framework.

Every error the library raises derives from ``DvmError`` so callers (the CLI in
particular) can catch the whole family at once, while the builtin bases keep
``except ValueError`` style handling working.
"""


class DvmError(Exception):
    """Base class for all framework errors."""


class ShapeError(DvmError, ValueError):
    """Array or network dimensions do not line up."""


class NumericError(DvmError, ArithmeticError):
    """A non-finite value reached an optimizer update."""


class ParameterError(DvmError, ValueError):
    """An argument is outside its valid domain."""


class ProtocolError(DvmError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class BufferStateError(DvmError, RuntimeError):
    """The replay buffer cannot serve the request (e.g. it is empty)."""


class ConfigurationError(DvmError, ValueError):
    """An experiment, algorithm or DVM configuration is invalid."""


class HomogeneityError(DvmError, ValueError):
    """Agents combined by DVM do not share network shapes."""


class UnsupportedError(DvmError, NotImplementedError):
    """The operation is not defined for the requested domain."""


class SnapshotError(DvmError, OSError):
    """A parameter snapshot container is malformed."""
