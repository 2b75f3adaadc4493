"""Exception types shared across the package."""


class TrainsimError(Exception):
    """Base class for all package errors."""


class ConfigError(TrainsimError):
    """Invalid or inconsistent configuration input (file or inline)."""


class PlanError(TrainsimError):
    """A parallelization plan violates a structural invariant."""


class ProfileError(TrainsimError):
    """A profile database file failed to parse or validate."""


class GraphError(TrainsimError):
    """An execution graph is malformed (cycle, dangling node, ...)."""


class SimulationError(TrainsimError):
    """The simulation engine could not complete a run."""
