"""Shared exception types."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class StateError(RuntimeError):
    """Operation called in the wrong order (e.g. backward without forward)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class SchemaError(ValueError):
    """File content does not match the declared schema."""


class SimulationFault(RuntimeError):
    """Physics produced a non-finite state; episode must abort as failure."""
