"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` used by the command line front end:
2 for configuration problems, 3 for linear solver failures, 4 for
geometry and discretization problems.
"""


class GapDiffusionError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(GapDiffusionError):
    """Invalid run configuration (unknown key, missing field, bad range)."""

    exit_code = 2

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        prefix = ""
        if line is not None:
            prefix = f"config line {line}: "
        super().__init__(prefix + message)


class TooManyRequested(GapDiffusionError):
    """More eigenpairs requested than support degrees of freedom."""

    exit_code = 2


class TooLargeForDense(GapDiffusionError):
    """Support block exceeds the dense assembly threshold."""

    exit_code = 2


class SolverDiverged(GapDiffusionError):
    """Iterative solver failed to reach the requested tolerance."""

    exit_code = 3

    def __init__(self, message, iterations=None, relres=None):
        self.iterations = iterations
        self.relres = relres
        if iterations is not None and relres is not None:
            message = f"{message} (iters={iterations} relres={relres:.3e})"
        super().__init__(message)


class GeometryError(GapDiffusionError):
    """Base class for geometry and discretization errors."""

    exit_code = 4


class DepthTooLarge(GeometryError):
    """Snowflake recursion depth above the supported maximum."""


class UnsupportedGeometry(GeometryError):
    """Geometry outside what the solver handles (alignment, containment)."""


class EmptySupport(GeometryError):
    """The measure support carries no mass on the mesh."""


class NonMarkovianDiscretization(GeometryError):
    """Schur complement has significantly positive off-diagonal entries."""
