"""Exception hierarchy shared by the dagmesh modules."""


class DagmeshError(Exception):
    """Base class for all errors raised by this package."""


class JobError(DagmeshError):
    """Malformed job definition: schema, graph structure, or shape problems."""


class CatalogError(JobError):
    """Unknown operator class or invalid operator configuration."""


class FleetError(DagmeshError):
    """Malformed fleet description or invalid peer/link parameters."""


class SchedulingError(DagmeshError):
    """Scheduling request that cannot be satisfied (empty fleet, oversized instance, ...)."""


class SimulationError(DagmeshError):
    """Unrecoverable condition during simulation (deadlock, data loss, no replacement)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
