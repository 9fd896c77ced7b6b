"""Exception hierarchy shared by the whole package."""


class MFPFError(Exception):
    """Base class for all package errors."""


class ConfigError(MFPFError, ValueError):
    """Invalid configuration or mismatched dimensions."""


class NumericalError(MFPFError, ArithmeticError):
    """A numerical failure (blow-up, weight collapse, negative variance...).

    ``step`` carries the time index at which the failure was detected, when known.
    """

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (time index {step})"
        super().__init__(message)


class DegenerateEnsembleError(MFPFError, ValueError):
    """Ensemble too small or collapsed for the requested operation."""


class InfeasibleTransportError(MFPFError, ValueError):
    """Marginals or kernel admit no feasible transport plan."""
