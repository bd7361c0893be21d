"""Exception hierarchy.

Two families matter to callers (and to the CLI exit codes): ``DataError`` for
malformed or inconsistent inputs, ``NumericalError`` for estimation that cannot
produce a trustworthy number.
"""


class StretchqError(Exception):
    pass


class DataError(StretchqError, ValueError):
    """Input data is malformed, inconsistent or outside the valid domain."""


class GradientTableError(DataError):
    pass


class NiftiError(DataError):
    pass


class InvalidAttenuationError(DataError):
    pass


class NumericalError(StretchqError, ArithmeticError):
    """A numerical procedure failed to produce a valid result."""


class RankDeficientError(NumericalError):
    pass


class UnderdeterminedFitError(NumericalError):
    pass


class EstimationError(NumericalError):
    pass


class QuadratureError(NumericalError):
    pass
