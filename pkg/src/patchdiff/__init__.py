"""Effective diffusivity of passive scalars under vortex-patch transport noise."""

__version__ = "0.1.0"

from .errors import (ConfigurationError, DataError, DomainError, FitError, PatchDiffError,
                     PreconditionError, SolverError, UsageError)
from .patch_field import Grid2D, PatchParams, SymMatrixField, assemble_A

__all__ = [
    "ConfigurationError", "DataError", "DomainError", "FitError", "PatchDiffError",
    "PreconditionError", "SolverError", "UsageError", "Grid2D", "PatchParams",
    "SymMatrixField", "assemble_A",
]
