"""SL-GFEM and SLOD multiscale solvers for -div(A grad u) = f on the unit square."""
from .fem import NumericalFailure

__all__ = ["NumericalFailure", "mesh", "fem", "poly", "slgfem", "slod", "problems", "experiments", "cli"]
__version__ = "0.1.0"
