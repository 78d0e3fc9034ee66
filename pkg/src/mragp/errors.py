# File: src/mragp/errors.py

"""Exception hierarchy shared by all mragp modules."""


class MRAError(Exception):
    """Base exception for mragp errors."""


class ConfigError(MRAError, ValueError):
    """Invalid experiment configuration (unknown key, bad value, missing section)."""


class DataError(MRAError, ValueError):
    """Unusable input data: unparseable CSV, empty split, no observations."""


class GeometryError(MRAError, ValueError):
    """Unsupported domain/partition setup or a point outside the domain."""


class PatternError(MRAError, ValueError):
    """A requested sparsity pattern is not available from a factorization."""


class NumericalError(MRAError, ArithmeticError):
    """Base class for numerical failures."""


class NotPositiveDefiniteError(NumericalError):
    """Matrix is not positive definite, even after the jitter retry."""


class SingularBasisError(NumericalError):
    """The square basis matrix of the noiseless path is singular."""
