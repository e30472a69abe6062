"""Exception taxonomy shared across the package.

ValidationError covers bad inputs and configs (CLI exit code 3);
SimulationFault covers runtime numeric failures (CLI exit code 4).
"""


class ValidationError(ValueError):
    """Input or configuration violates a documented precondition."""


class SplitAccessError(RuntimeError):
    """A pipeline stage touched frames outside its allowed split."""


class SimulationFault(RuntimeError):
    """Simulation produced invalid state (escape, blow-up, non-finite)."""

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = dict(context)

    def __str__(self):
        base = super().__str__()
        if self.context:
            details = ", ".join(f"{k}={v}" for k, v in sorted(self.context.items()))
            return f"{base} ({details})"
        return base
