"""Exception hierarchy."""


class SurveyelError(Exception):
    """Base class for all errors raised by this package."""


class DataError(SurveyelError):
    """Malformed or inconsistent input data."""


class FitError(SurveyelError):
    """A working model could not be fitted."""


class SolverError(SurveyelError):
    """A numerical solver failed to converge."""


class InfeasibleError(SolverError):
    """Empirical-likelihood constraints admit no interior solution."""
