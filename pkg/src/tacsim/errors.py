class TacsimError(Exception):
    """Base class for all tacsim errors."""


class ValidationError(TacsimError, ValueError):
    """Invalid configuration, argument, or shape."""


class NumericalError(TacsimError, RuntimeError):
    """Non-finite values encountered during computation."""
