"""Structure-aware anisotropic noise and denoising for atomistic systems."""
from .errors import (AnidsError, CoincidentAtoms, DimensionMismatch, Diverged, DomainError, EmptyMask,
                     MissingLabels, NonFiniteGradient, NotPositiveDefinite, ParseError)

__version__ = "0.1.0"

__all__ = [
    "AnidsError", "CoincidentAtoms", "DimensionMismatch", "Diverged", "DomainError", "EmptyMask",
    "MissingLabels", "NonFiniteGradient", "NotPositiveDefinite", "ParseError",
]
