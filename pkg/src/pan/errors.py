"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A precondition on arguments was violated."""


class NumericError(RuntimeError):
    """A computation produced or encountered non-finite values."""


class SamplingError(RuntimeError):
    """A random sampling routine cannot satisfy its request."""


class GenerationError(RuntimeError):
    """A dataset generator cannot satisfy its request."""


class BundleFormatError(ValueError):
    """A dataset file failed to parse or cross-file consistency checks."""
