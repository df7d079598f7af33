"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so new error kinds should
subclass one of the existing categories rather than raising bare
exceptions.
"""


class KoopformerError(Exception):
    """Base class for all package errors."""


class ConfigError(KoopformerError):
    """Invalid configuration: unknown keys, missing fields, bad values."""


class DimensionError(KoopformerError):
    """Shape mismatch between operands."""

    @classmethod
    def mismatch(cls, op, a_shape, b_shape):
        return cls(f"{op}: incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}")


class InputDomainError(KoopformerError):
    """Input outside the operation's domain (non-finite values, bad ranges)."""


class DivergenceError(KoopformerError):
    """A numerical computation produced non-finite values.

    ``step`` identifies where the blow-up happened (integration step,
    epoch/batch index, or parameter name, depending on context).
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class PrerequisiteError(KoopformerError):
    """A pipeline stage was invoked before the stage that produces its input."""
