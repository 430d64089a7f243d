"""Exception types shared across the library.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numeric failures exit 3.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes. The message reports both shapes."""


class ConfigError(ValueError):
    """A layer, profile, or run configuration is invalid."""


class ArchitectureError(ConfigError):
    """A model cannot be built as specified (e.g. temporal axis collapses)."""


class DataError(ValueError):
    """Input data violates its declared format or range."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or is otherwise numerically invalid."""
