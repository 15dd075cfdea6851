"""Exception hierarchy shared by all deepinsert modules.

Everything raised on purpose derives from :class:`DeepInsertError`, so callers
(and the CLI) can distinguish contract violations from genuine bugs.
"""


class DeepInsertError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DeepInsertError):
    """Operands have incompatible shapes or widths."""


class ConfigError(DeepInsertError):
    """A configuration value violates its documented constraints."""


class ValidationError(DeepInsertError):
    """A runtime invariant (positions, cache state, input range) was violated."""


class CheckpointError(DeepInsertError):
    """Checkpoint file is malformed, version-mismatched, or inconsistent."""


class DataFormatError(DeepInsertError):
    """A dataset file is malformed or carries an unsupported schema version."""


class DivergenceError(DeepInsertError):
    """Training produced non-finite values (loss or gradients)."""
