"""Exception types shared across the solver modules."""


class QsmpError(Exception):
    """Base class for toolkit-specific failures."""


class SolverError(QsmpError):
    """A numerical solve aborted; ``step`` is the offending time-step index."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ExplosionError(SolverError):
    """A simulated state left the admissible range (blow-up guard)."""


class IllConditionedBasisError(QsmpError):
    """Regression features are rank deficient and no ridge was requested."""


class ConfigError(QsmpError):
    """An experiment configuration failed to parse or validate."""

    def __init__(self, message, location=None):
        self.location = location
        super().__init__(message if location is None else f"{location}: {message}")
