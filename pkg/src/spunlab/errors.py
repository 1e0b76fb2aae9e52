"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid parameter value. ``field`` names the offending input."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class StepError(RuntimeError):
    """Newton iteration of an implicit step did not converge."""

    def __init__(self, message, residual_norm=float("nan"), time=float("nan")):
        self.residual_norm = residual_norm
        self.time = time
        super().__init__(f"{message} (residual={residual_norm:.3e}, t={time:.6g})")


class EmptyResultError(ValueError):
    """A filtering operation removed every element."""


class InsufficientDataError(ValueError):
    """Too few (or degenerate) samples for an estimator."""


def require_positive(field, value):
    if not value > 0:
        raise ValidationError(field, f"must be > 0, got {value!r}")


def require_nonnegative(field, value):
    if not value >= 0:
        raise ValidationError(field, f"must be >= 0, got {value!r}")
