"""Exception types shared across the package."""


class GateSearchError(Exception):
    """Base class for all package errors."""


class StructuralError(GateSearchError):
    """Graph is malformed: bad wiring, shape mismatch, illegal rewrite."""


class ConfigurationError(GateSearchError):
    """Invalid configuration value or missing required setting."""


class StateError(GateSearchError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class DivergenceError(GateSearchError):
    """Training produced a non-finite loss or gradient."""


class DataError(GateSearchError):
    """Dataset file could not be parsed or violates its format contract."""
