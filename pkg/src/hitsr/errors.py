"""Exception hierarchy shared by every layer of the package.

Each class marks a distinct failure mode so callers (and the CLI exit-code
mapping) can react without string matching.
"""


class HitsrError(Exception):
    """Base class for all package errors."""


class DimensionError(HitsrError):
    """Operands have incompatible shapes. The message names both shapes."""


class ConfigurationError(HitsrError):
    """A config value is out of its legal domain or keys are unknown."""


class ContractError(HitsrError):
    """An API was called in a way its contract forbids (for example
    backward on a non-scalar, or reusing a consumed tape)."""


class NumericError(HitsrError):
    """Non-finite values appeared where finiteness is required."""


class CapabilityError(HitsrError):
    """The requested computation is outside the supported subset, such as
    a second-order gradient through an op with no symbolic adjoint."""


class FormatError(HitsrError):
    """A file (checkpoint, image, config) does not parse as its format."""
