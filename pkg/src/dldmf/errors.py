"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent shapes, widths, or settings detected before any computation."""


class CheckpointError(IOError):
    """A checkpoint or dataset file could not be decoded."""


class IntegrationDiverged(FloatingPointError):
    def __init__(self, time, message=None):
        self.time = float(time)
        super().__init__(message or f"latent state became non-finite at t={self.time:.6g}")


class IntegrationHorizonError(ValueError):
    """Query time lies beyond step * max_steps of the integrator."""


class SolverDiverged(FloatingPointError):
    def __init__(self, time, mu=None):
        self.time = float(time)
        self.mu = mu
        where = f" for mu={mu}" if mu is not None else ""
        super().__init__(f"reference solution became non-finite at t={self.time:.6g}{where}")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, parts):
        self.step = step
        self.parts = dict(parts)
        detail = ", ".join(f"{k}={v:.4g}" for k, v in self.parts.items())
        super().__init__(f"non-finite loss at step {step} ({detail})")


class AutodecodeDiverged(FloatingPointError):
    def __init__(self, step, rate):
        self.step = step
        super().__init__(
            f"auto-decoding loss became non-finite at step {step}; try a learning rate below {rate:g}"
        )


class NumericalError(ArithmeticError):
    """An iterative numerical kernel failed to converge."""


class MissingReference(LookupError):
    def __init__(self, mu):
        self.mu = mu
        super().__init__(f"no reference solution for mu={mu}")
