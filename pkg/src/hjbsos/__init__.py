"""Synthesis of stochastic control Lyapunov functions and suboptimal
stabilizing controllers for linearly solvable stochastic systems, via a
hierarchy of sum-of-squares relaxations of the transformed (linear) dynamic
programming equation, with simulation and finite-difference cross-checks."""

__version__ = "0.1.0"

from .polynomials import Polynomial, PolyMatrix, parse_polynomial
from .domains import BoundarySet, SemialgebraicSet

__all__ = [
    "Polynomial",
    "PolyMatrix",
    "parse_polynomial",
    "BoundarySet",
    "SemialgebraicSet",
    "__version__",
]
