"""Exception types raised across the package."""


class ParameterError(ValueError):
    """Invalid distribution or model parameters."""


class OrderIndexError(ValueError):
    """Order-statistic rank outside its admissible range."""


class DomainError(ValueError):
    """Evaluation point outside the support of a density."""


class DegenerateSupportError(ValueError):
    """Conditioning or truncation on an event of probability zero."""


class NumericError(ArithmeticError):
    """Non-finite likelihood or density value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EstimationError(RuntimeError):
    """Every optimizer start failed."""


class ConfigError(ValueError):
    """Malformed run configuration."""

    def __init__(self, message, key_path=None):
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)
        self.key_path = key_path


class IdentificationError(RuntimeError):
    """Base class for failures of the operator-diagonalization pipeline."""


class AmbiguousDecompositionError(IdentificationError):
    """Two eigenvalues too close to separate the eigenvectors."""


class DecompositionQualityError(IdentificationError):
    """Recovered eigenvector carries material negative mass."""


class ConditioningError(IdentificationError):
    """Matrix inversion attempted on an ill-conditioned operator."""


class CutoffPlacementError(IdentificationError):
    """Scale-pinning system is singular for the chosen cutoffs."""


class OrderingAmbiguityError(IdentificationError):
    """Conditional means tie, so the heterogeneity cannot be ordered."""


class QuantileError(ValueError):
    """Quantile is not unique because the CDF is flat there."""
