"""Exception types shared across the quantization engine."""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class ArgumentError(ValueError):
    """An argument value is outside its documented domain."""


class NumericError(ArithmeticError):
    """A finiteness invariant was violated during computation."""


class FactorizationError(ArithmeticError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class SingularityError(FactorizationError):
    """Normal equations are rank deficient."""


class CalibrationError(RuntimeError):
    """Calibration state cannot support the requested operation."""


class CorruptFileError(RuntimeError):
    """A container file failed structural or checksum validation."""


class FormatVersionError(RuntimeError):
    """A container file declares an unsupported format version."""


class ModelSpecError(ValueError):
    """A synthetic model specification is internally inconsistent."""
