"""Exception hierarchy shared by all stages of the pipeline."""


class CGOError(Exception):
    """Base class for package errors."""


class ConfigError(CGOError, ValueError):
    """Invalid parameters or inconsistent inputs."""


class GeometryError(ConfigError):
    """Electrode caps overlap, vectors not orthogonal, bandlimit mismatch."""


class NumericalError(CGOError, ArithmeticError):
    """A numerical stage failed (singular matrix, division by zero, ...)."""


class SolverError(NumericalError):
    """An iterative solve did not converge.

    Attributes
    ----------
    residual : float
        Relative residual reached when the solver stopped.
    iterations : int
        Iterations performed.
    """

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations
