"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class SizeError(ValueError):
    """An input collection is too small for the requested operation."""


class InsufficientCorrespondenceError(ValueError):
    """Fewer point pairs than needed to determine a rigid transform."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(ValueError):
    """A file does not conform to its expected format."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class GraphStateError(RuntimeError):
    """Backward pass requested without a recorded forward graph."""


class EmptyEvaluationError(ValueError):
    """A metric aggregate was requested over zero records."""
