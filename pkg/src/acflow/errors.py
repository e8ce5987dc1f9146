"""Exception types shared across the package."""


class NonFinite(FloatingPointError):
    """A NaN or Inf appeared in a field update."""


class ConstraintBlowup(RuntimeError):
    """Constraint drift exceeded the retraction threshold before projection."""


class ReconstructionFailure(ValueError):
    """A structure does not lie in the modelled orientation component."""

    def __init__(self, residual: float, point):
        self.residual = residual
        self.point = point
        super().__init__(f"reconstruction residual {residual:.3g} at grid point {point}")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class SnapshotError(IOError):
    """Malformed, truncated or mismatched snapshot file."""
