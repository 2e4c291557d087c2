"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when inputs violate a documented contract (shapes, ranges, counts)."""


class DegenerateInputError(ValidationError):
    """Raised for inputs that are structurally valid but numerically unusable
    (e.g. a zero-norm token fed to cosine similarity)."""


class TrainingDivergedError(RuntimeError):
    """Raised when the optimization loop hits a non-finite loss."""


class GradientCheckError(RuntimeError):
    """Raised when analytic gradients disagree with finite differences."""
