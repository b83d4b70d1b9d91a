"""Taylor-Hood Stokes and Lagrange Poisson discretizations."""
from .assembly import (EdgeSet, NullspaceError, SparseSystem, assemble_poisson, assemble_stokes,
                       divergence, edge_load, edge_mass, load, mass, stiffness, vector_laplacian)
from .constraints import ConstraintError, ConstraintSet
from .fields import (Field, Profile, evaluate_along_line, integrate_edge, read_profile_csv,
                     write_profile_csv)
from .solve import SingularSystemError, Solution, solve
from .spaces import P1, P2, FunctionSpace, P2vec

__all__ = [
    "EdgeSet", "NullspaceError", "SparseSystem", "assemble_poisson", "assemble_stokes",
    "divergence", "edge_load", "edge_mass", "load", "mass", "stiffness", "vector_laplacian",
    "ConstraintError", "ConstraintSet", "Field", "Profile", "evaluate_along_line",
    "integrate_edge", "read_profile_csv", "write_profile_csv", "SingularSystemError",
    "Solution", "solve", "P1", "P2", "FunctionSpace", "P2vec",
]
