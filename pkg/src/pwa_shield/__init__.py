"""Probabilistic safety filters for piecewise affine barrier functions.

The safe set is the complement of a union of open convex polyhedra.  A
filter projects a base input onto chance-tightened facet constraints so the
closed loop leaves the safe set within ``N`` steps with probability at most
``epsilon``.
"""

from .barrier import Polyhedron, PwaBarrier, from_obstacles
from .dynamics import LinearDynamics, UnicycleDynamics, rotation_z
from .filter import (ConfigError, FilterConfig, FilterResult, SafetyFilter,
                     candidate_order, filter_step_exact, filter_step_heuristic)
from .noise import Empirical, Gaussian, Laplace, StudentT
from .qp import BACKEND as QP_BACKEND

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Empirical", "FilterConfig", "FilterResult", "Gaussian", "Laplace",
    "LinearDynamics", "Polyhedron", "PwaBarrier", "QP_BACKEND", "SafetyFilter", "StudentT",
    "UnicycleDynamics", "candidate_order", "filter_step_exact", "filter_step_heuristic",
    "from_obstacles", "rotation_z",
]
