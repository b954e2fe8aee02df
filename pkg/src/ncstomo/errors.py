"""Exception and warning types.

The CLI maps each family to an exit code: usage 2, data/format 3,
numerical 4. The base class carries none; raise one of the families.
"""


class NcsError(Exception):
    pass


class UsageError(NcsError, ValueError):
    exit_code = 2


class DataError(NcsError, ValueError):
    exit_code = 3


class HeaderError(DataError):
    """Sidecar JSON missing, unparsable or of the wrong type."""


class ShapeError(DataError):
    """Array shapes disagree with each other or with a sidecar."""


class TruncatedError(DataError):
    """Raw payload shorter than its sidecar promises."""


class GeometryError(DataError):
    """Scan geometry cannot be realized (coverage, source position)."""


class NumericalError(NcsError, RuntimeError):
    exit_code = 4


class DivergenceError(NumericalError):
    pass


class MetricError(NumericalError):
    """M does not dominate alpha * A^T A on the probed direction."""


class NcsWarning(UserWarning):
    pass


class StepSizeWarning(NcsWarning):
    pass


class MetricWarning(NcsWarning):
    pass


class ReferenceWarning(NcsWarning):
    pass
