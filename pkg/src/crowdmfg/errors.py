"""Exception types shared by the solver modules."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its iteration budget.

    Carries the residual history so callers can report it instead of
    silently returning a stale iterate.
    """

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else []


class CflError(RuntimeError):
    """A requested time step violates the stability bound."""


class DensityBoundError(RuntimeError):
    """A density iterate left [0, rho_max] beyond tolerance; aborts the run."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class ConfigError(ValueError):
    """Config parsing/validation failed; `errors` lists (line, message) pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        lines = "; ".join(f"line {ln}: {msg}" for ln, msg in self.errors)
        super().__init__(f"{len(self.errors)} config error(s): {lines}")
