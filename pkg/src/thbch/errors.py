class DomainError(ValueError):
    """A point or parameter lies outside the admissible domain."""


class StructureError(ValueError):
    """Spaces, meshes or mark sets are structurally incompatible."""


class ConfigError(ValueError):
    """Invalid run configuration."""


class StepFailure(RuntimeError):
    """A time step (Newton loop or adaptation loop) did not converge.

    The report of the failed attempt is kept on ``self.report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SolverError(RuntimeError):
    """The linear solver failed (singular or non-finite system)."""


class MetricError(ValueError):
    """An error metric is undefined (e.g. zero reference norm)."""
