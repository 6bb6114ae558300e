"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can report
failures as ``{"error": {"code": ..., "message": ...}}``.
"""


class DMLError(Exception):
    code = "error"


# -- input / persistence ------------------------------------------------------

class FormatError(DMLError):
    code = "format_error"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TruncatedError(DMLError):
    code = "truncated"


class VersionError(DMLError):
    code = "version_mismatch"


class EmptyInput(DMLError):
    code = "empty_input"


class NonFiniteValue(DMLError, ValueError):
    code = "non_finite"

    def __init__(self, line, column, raw=None):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: non-finite or unparseable value {raw!r}")


class DegenerateRow(DMLError):
    code = "degenerate_row"

    def __init__(self, index):
        self.index = index
        super().__init__(f"row {index} has (near) zero norm")


class UnknownClass(DMLError):
    code = "unknown_class"


class EmptySplit(DMLError):
    code = "empty_split"


class ShapeError(DMLError, ValueError):
    code = "shape_error"


# -- metrics ------------------------------------------------------------------

class InvalidK(DMLError, ValueError):
    code = "invalid_k"


class InsufficientData(DMLError):
    code = "insufficient_data"


class NeedTwoClasses(DMLError):
    code = "need_two_classes"


class SingletonClass(DMLError):
    code = "singleton_class"

    def __init__(self, class_id):
        self.class_id = class_id
        super().__init__(f"class {class_id} has a single sample")


class DegenerateSpectrum(DMLError):
    code = "degenerate_spectrum"


# -- fid / splits -------------------------------------------------------------

class NotSymmetric(DMLError):
    code = "not_symmetric"


class NumericalFailure(DMLError):
    code = "numerical_failure"


class CannotSwap(DMLError):
    code = "cannot_swap"


class DegenerateAxis(DMLError):
    code = "degenerate_axis"


# -- losses / training --------------------------------------------------------

class NotNormalized(DMLError):
    code = "not_normalized"


class NoNegatives(DMLError):
    code = "no_negatives"


class InvalidState(DMLError):
    code = "invalid_state"


class NonFinite(DMLError):
    code = "non_finite_gradient"


class InsufficientSupport(DMLError):
    code = "insufficient_support"

    def __init__(self, class_id, count, shots):
        self.class_id = class_id
        super().__init__(f"class {class_id} has {count} samples, need more than {shots}")
