"""Small dense Euclidean projection QPs.

``solve`` returns the projection of ``u_ref`` onto ``{u : A u >= lb,
lower <= u <= upper}`` using a dual active-set method specialised to the
identity Hessian.  The kernel comes from the compiled extension when it is
importable and from a numpy implementation otherwise; set
``PWA_SHIELD_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from . import _kernel_py

logger = logging.getLogger(__name__)

try:
    from . import _kernel as _kernel_ext
except ImportError:  # extension not built
    _kernel_ext = None

_requested = os.environ.get("PWA_SHIELD_BACKEND", "auto").lower()
if _requested == "python" or _kernel_ext is None:
    BACKEND = "python"
    _solve_kernel = _kernel_py.solve_kernel
else:
    BACKEND = "compiled"
    _solve_kernel = _kernel_ext.solve_kernel

KERNELS = {"python": _kernel_py.solve_kernel}
if _kernel_ext is not None:
    KERNELS["compiled"] = _kernel_ext.solve_kernel

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max_iterations"
_STATUS = {0: OPTIMAL, 1: INFEASIBLE, 2: MAX_ITERATIONS}


class QpError(ValueError):
    """Malformed QP data."""


@dataclass(frozen=True)
class Tolerances:
    feas_tol: float = 1e-8
    stat_tol: float = 1e-9
    zero_tol: float = 1e-12
    max_iter: Optional[int] = None  # default 10 * (m + na)


DEFAULT_TOL = Tolerances()


@dataclass(frozen=True, eq=False)
class QpProblem:
    """``min |u - u_ref|^2`` subject to ``A u >= lb`` and optional box bounds."""

    u_ref: np.ndarray
    A: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        u_ref = np.asarray(self.u_ref, dtype=float).reshape(-1)
        na = u_ref.size
        A = np.zeros((0, na)) if self.A is None else np.asarray(self.A, dtype=float).reshape(-1, na)
        lb = np.zeros(0) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(-1)
        if A.shape[0] != lb.shape[0]:
            raise QpError(f"A has {A.shape[0]} rows but lb has {lb.shape[0]} entries")
        lower = None if self.lower is None else np.broadcast_to(
            np.asarray(self.lower, dtype=float), (na,)).copy()
        upper = None if self.upper is None else np.broadcast_to(
            np.asarray(self.upper, dtype=float), (na,)).copy()
        if lower is not None and upper is not None and np.any(lower > upper):
            raise QpError("box lower bound exceeds upper bound")
        object.__setattr__(self, "u_ref", u_ref)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def na(self) -> int:
        return self.u_ref.size

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All constraints as ``G u >= h``: general rows, then finite lower, then finite upper bounds."""
        return stack_constraints(self.A, self.lb, self.lower, self.upper)

    def to_dict(self) -> dict:
        return {
            "u_ref": self.u_ref.tolist(),
            "A": self.A.tolist(),
            "lb": self.lb.tolist(),
            "lower": None if self.lower is None else self.lower.tolist(),
            "upper": None if self.upper is None else self.upper.tolist(),
        }


@dataclass
class QpSolution:
    status: str
    u_star: Optional[np.ndarray]
    objective: float
    kkt_residual: float
    iterations: int
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    certificate: Optional[np.ndarray] = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "u_star": None if self.u_star is None else self.u_star.tolist(),
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "active": self.active.tolist(),
            "multipliers": self.multipliers.tolist(),
        }


def stack_constraints(A, lb, lower=None, upper=None):
    na = A.shape[1]
    blocks_G = [A]
    blocks_h = [lb]
    eye = np.eye(na)
    if lower is not None:
        keep = np.isfinite(lower)
        blocks_G.append(eye[keep])
        blocks_h.append(lower[keep])
    if upper is not None:
        keep = np.isfinite(upper)
        blocks_G.append(-eye[keep])
        blocks_h.append(-upper[keep])
    G = np.ascontiguousarray(np.vstack(blocks_G), dtype=float)
    h = np.ascontiguousarray(np.concatenate(blocks_h), dtype=float)
    return G, h


def solve_stacked(G: np.ndarray, h: np.ndarray, u_ref: np.ndarray,
                  tol: Tolerances = DEFAULT_TOL, kernel=None) -> QpSolution:
    """Project ``u_ref`` onto ``{u : G u >= h}``; ``G`` must be C-contiguous float64."""
    m, na = G.shape
    max_iter = tol.max_iter if tol.max_iter is not None else 10 * (m + na)
    status, u, active, mult, iters, ray = (kernel or _solve_kernel)(
        G, h, u_ref, tol.feas_tol, tol.zero_tol, max_iter
    )
    status = _STATUS[status]
    if status != OPTIMAL:
        return QpSolution(status, None, math.inf, math.inf, iters, active, mult, ray)
    diff = u - u_ref
    resid = diff - G[active].T @ mult if active.size else diff
    kkt = float(np.max(np.abs(resid))) if resid.size else 0.0
    if kkt > tol.stat_tol:
        logger.debug("stationarity residual %.3g above tolerance", kkt)
    return QpSolution(status, u, float(diff @ diff), kkt, iters, active, mult, None)


def solve(problem: QpProblem, tol: Tolerances = DEFAULT_TOL, backend: str | None = None) -> QpSolution:
    G, h = problem.stacked()
    kernel = KERNELS[backend] if backend is not None else None
    return solve_stacked(G, h, problem.u_ref, tol, kernel)


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    margin: float


def max_min_slack(G: np.ndarray, h: np.ndarray) -> float:
    """``max_u min_i (G u - h)_i``; ``inf`` when unbounded."""
    m, na = G.shape
    if m == 0:
        return math.inf
    # Variables (u, t): minimise -t subject to t - G u <= -h.
    c = np.zeros(na + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-G, np.ones((m, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=-h, bounds=[(None, None)] * (na + 1), method="highs")
    if res.status == 3:
        return math.inf
    if res.status != 0:
        raise RuntimeError(f"phase-1 LP failed: {res.message}")
    return float(-res.fun)


def feasibility_check(problem: QpProblem, tol: Tolerances = DEFAULT_TOL) -> Feasibility:
    G, h = problem.stacked()
    sol = solve_stacked(G, h, problem.u_ref, tol)
    return Feasibility(sol.status == OPTIMAL, max_min_slack(G, h))


__all__ = [
    "BACKEND", "KERNELS", "DEFAULT_TOL", "Feasibility", "INFEASIBLE", "MAX_ITERATIONS",
    "OPTIMAL", "QpError", "QpProblem", "QpSolution", "Tolerances", "feasibility_check",
    "max_min_slack", "solve", "solve_stacked", "stack_constraints",
]
