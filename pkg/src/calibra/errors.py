"""Exception hierarchy shared across the package."""


class CalibraError(Exception):
    """Base class for all errors raised by calibra."""


class ConfigError(CalibraError):
    pass


class DataError(CalibraError):
    """Invalid dataset content (labels out of range, missing columns, ...)."""


class EmptyRegion(CalibraError):
    pass


class EmptyGroup(DataError):
    pass


class NotFound(CalibraError):
    """Exhaustive search finished without a witness."""


class NonTermination(CalibraError):
    """An iterative calibration loop exceeded its guard budget.

    Almost always means a Lipschitz/monotonicity constant asserted by the
    caller does not hold on the data.
    """


class SolverError(CalibraError):
    pass


class AdversaryError(CalibraError):
    pass
