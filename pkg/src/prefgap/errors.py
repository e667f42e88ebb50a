"""Failure taxonomy shared across the package.

The CLI maps these onto exit codes: claim violations exit 2, numeric
failures exit 3, schema/IO problems exit 4. Everything else is a plain
bug and is allowed to propagate.
"""
from __future__ import annotations


class DomainError(ValueError):
    """Inputs outside an operation's mathematical domain."""


class NumericFailure(ArithmeticError):
    """Overflow, non-convergence, or loss of precision beyond contract."""


class ConvergenceFailure(NumericFailure):
    """Iterative solver exhausted its budget; carries the final residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class UnsupportedQuery(NotImplementedError):
    """A relation or decomposition the implementation refuses to guess."""


class ResourceLimit(RuntimeError):
    """Work would exceed a documented enumeration/size cap."""


class ConstructionFailure(RuntimeError):
    """A randomized construction failed its verified preconditions."""


class ClaimViolation(AssertionError):
    """A scenario's asserted inequality failed; message carries diagnostics."""


class SchemaError(ValueError):
    """Malformed CSV/JSON input or output schema mismatch."""
