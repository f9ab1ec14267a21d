"""Probabilistic safety filter over piecewise-affine barriers.

For each polyhedron ``i`` the next nominal state ``f(x, u)`` must clear at
least one facet ``j`` by a quantile margin::

    c_ij . f(x, u) >= q_ij(x) = b_ij + alpha h(x) - Q_ij(x)

where ``Q_ij`` is the ``delta_i``-quantile of ``c_ij . g(x, xi)`` (analytic
path) or an order statistic of a dataset that lower-bounds it with
confidence ``1 - gamma`` (data-driven path).  Choosing one facet per
polyhedron (an assignment) turns the disjunctive condition into a single
projection QP.

``SafetyFilter.step_heuristic`` tries assignments in a greedy order and
returns the first feasible projection.  ``SafetyFilter.step_exact`` returns
the cheapest feasible projection over all assignments, either by plain
enumeration or by a disjunctive branch-and-bound that reaches the same
optimum without visiting every assignment.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from . import noise as nz
from . import qp
from .barrier import PwaBarrier
from .dynamics import Dynamics

Assignment = tuple[int, ...]

ENUMERATION_CAP = 10**6
_DELTA_SLACK = 1e-15


class ConfigError(ValueError):
    """Invalid filter configuration (levels, sample sizes, caps)."""


@dataclass(frozen=True)
class FilterConfig:
    epsilon: float = 0.1
    horizon: int = 20
    alpha: float = 0.0
    per_step_delta: Optional[float] = None
    confidence: Optional[float] = None
    confidence_mode: str = "state_independent"
    max_inner_iters: Optional[int] = 32
    order_anchor: str = "current"
    sharp_discrete: bool = False
    recompute_each_step: bool = False

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ConfigError(f"horizon must be a positive integer, got {self.horizon}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.confidence is not None and not 0.0 < self.confidence < 1.0:
            raise ConfigError(f"confidence must lie in (0, 1), got {self.confidence}")
        if self.confidence_mode not in ("state_independent", "general"):
            raise ConfigError(f"unknown confidence mode {self.confidence_mode!r}")
        if self.order_anchor not in ("current", "predicted"):
            raise ConfigError(f"unknown order anchor {self.order_anchor!r}")
        if self.max_inner_iters is not None and self.max_inner_iters < 1:
            raise ConfigError("max_inner_iters must be positive or None")
        self.delta  # validates per_step_delta

    @property
    def delta_bound(self) -> float:
        return nz.delta_from_epsilon(self.epsilon, self.horizon)

    @property
    def delta(self) -> float:
        bound = self.delta_bound
        if self.per_step_delta is None:
            return bound
        d = float(self.per_step_delta)
        if not 0.0 < d < 1.0:
            raise ConfigError(f"per-step delta must lie in (0, 1), got {d}")
        if d > bound + _DELTA_SLACK:
            raise ConfigError(
                f"per-step delta {d:.6g} exceeds 1 - (1 - eps)^(1/N) = {bound:.6g}"
            )
        return min(d, bound)

    @property
    def gamma(self) -> Optional[float]:
        """Per-estimate confidence parameter derived from ``confidence``."""
        if self.confidence is None:
            return None
        if self.confidence_mode == "general":
            return self.confidence / self.horizon
        return self.confidence

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "horizon": self.horizon,
            "alpha": self.alpha,
            "per_step_delta": self.per_step_delta,
            "confidence": self.confidence,
            "confidence_mode": self.confidence_mode,
            "max_inner_iters": self.max_inner_iters,
            "order_anchor": self.order_anchor,
            "sharp_discrete": self.sharp_discrete,
            "recompute_each_step": self.recompute_each_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def allocate_risk(delta: float, n_polyhedra: int) -> np.ndarray:
    """Uniform split of the per-step budget over polyhedra."""
    if n_polyhedra < 1:
        raise ConfigError("need at least one polyhedron")
    return np.full(n_polyhedra, delta / n_polyhedra)


def compute_tau(gamma: float, nf_tot: int, n: int, delta_i: float) -> int:
    """Order-statistic rank for one polyhedron in the data-driven bound."""
    level = gamma / nf_tot
    need = nz.required_samples(level, delta_i)
    if n < need:
        raise ConfigError(
            f"{n} samples are not enough: confidence {gamma:g} over {nf_tot} facets "
            f"at level {delta_i:.6g} needs n >= {need}"
        )
    tau = nz.binom_inv_cdf(level, n, delta_i)
    if not 1 <= tau <= n:
        raise ConfigError(f"rank {tau} outside [1, {n}]")
    return tau


def check_assignment(h: PwaBarrier, j) -> Assignment:
    j = tuple(int(v) for v in j)
    if len(j) != h.n_polyhedra:
        raise ValueError(f"assignment has {len(j)} entries, barrier has {h.n_polyhedra} polyhedra")
    for i, (ji, nf) in enumerate(zip(j, h.n_facets)):
        if not 0 <= ji < nf:
            raise ValueError(f"facet index {ji} out of range for polyhedron {i} ({nf} facets)")
    return j


# -- tightening -------------------------------------------------------------


@dataclass(frozen=True)
class DataDrivenState:
    """Dataset plus the per-polyhedron ranks used by the order-statistic bound."""

    dataset: nz.Empirical
    taus: np.ndarray
    gamma: float
    cached_terms: Optional[np.ndarray] = None

    @classmethod
    def build(cls, h: PwaBarrier, dataset: nz.Empirical, cfg: FilterConfig,
              dynamics: Optional[Dynamics] = None, x=None) -> "DataDrivenState":
        gamma = cfg.gamma
        if gamma is None:
            raise ConfigError("data-driven filtering needs cfg.confidence")
        deltas = allocate_risk(cfg.delta, h.n_polyhedra)
        taus = np.array(
            [compute_tau(gamma, h.n_facets_total, dataset.n, d) for d in deltas], dtype=np.intp
        )
        state = cls(dataset, taus, gamma)
        if dynamics is None or dynamics.state_independent_noise:
            state = replace(state, cached_terms=state.terms(h, dynamics, x))
        return state

    def facet_taus(self, h: PwaBarrier) -> np.ndarray:
        return np.repeat(self.taus, h.n_facets)

    def terms(self, h: PwaBarrier, dynamics: Optional[Dynamics], x) -> np.ndarray:
        """Order statistics ``Z_(tau_i)`` of ``c_ij . g(x, xi_t)`` for every facet."""
        directions = _noise_directions(h, dynamics, x)
        samples = self.dataset.data @ directions.T
        return nz.order_statistics(samples, self.facet_taus(h))


def _noise_directions(h: PwaBarrier, dynamics: Optional[Dynamics], x) -> np.ndarray:
    G = None if dynamics is None else dynamics.noise_map(x)
    return h.C_all if G is None else h.C_all @ G


def _analytic_terms(h: PwaBarrier, model: nz.NoiseModel, deltas_facet: np.ndarray,
                    directions: np.ndarray, sharp: bool) -> np.ndarray:
    if isinstance(model, nz.Gaussian):
        return model.linear_quantiles(directions, deltas_facet)
    return np.array([
        model.linear_quantile(c, d, sharp_discrete=sharp)
        for c, d in zip(directions, deltas_facet)
    ])


@dataclass
class TightenedConstraints:
    """Per-facet right-hand sides, stacked in polyhedron order."""

    q: np.ndarray
    b_tilde: np.ndarray
    quantile_terms: np.ndarray
    offsets: np.ndarray

    def rows(self, j: Assignment) -> np.ndarray:
        return self.offsets[:-1] + np.asarray(j, dtype=np.intp)

    def facet(self, i: int, j: int) -> float:
        return float(self.q[self.offsets[i] + j])


def tightened_bounds(h: PwaBarrier, x, noise: nz.NoiseModel | None, cfg: FilterConfig,
                     dd: Optional[DataDrivenState] = None,
                     dynamics: Optional[Dynamics] = None) -> TightenedConstraints:
    """``q_ij(x)`` for every facet; ``dd`` selects the data-driven estimator."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    # Facet values are c.x - b, so h_i(F) >= alpha h(x) needs c.F >= b + alpha h(x).
    b_tilde = h.b_all + cfg.alpha * h.evaluate(x) if cfg.alpha else h.b_all.copy()
    if dd is not None:
        if dd.cached_terms is not None and not cfg.recompute_each_step:
            terms = dd.cached_terms
        else:
            terms = dd.terms(h, dynamics, x)
    else:
        if noise is None or isinstance(noise, nz.Empirical):
            raise ConfigError("analytic tightening needs an analytic noise model")
        deltas = np.repeat(allocate_risk(cfg.delta, h.n_polyhedra), h.n_facets)
        terms = _analytic_terms(h, noise, deltas, _noise_directions(h, dynamics, x),
                                cfg.sharp_discrete)
    q = b_tilde - terms
    if not np.all(np.isfinite(q)):
        raise ConfigError("non-finite tightened bound; check noise parameters")
    return TightenedConstraints(q, b_tilde, terms, h.offsets)


# -- candidate ordering -----------------------------------------------------


def candidate_order(h: PwaBarrier, anchor) -> Iterator[Assignment]:
    """Assignments in greedy order of facet values at ``anchor``.

    Facets of each polyhedron are ranked by decreasing value; polyhedra are
    ranked by decreasing block value, and the product is walked
    lexicographically so the most violated polyhedron varies fastest.
    Ties keep the original index order.
    """
    vals = h.facet_values(anchor)
    off = h.offsets
    block_id = np.repeat(np.arange(h.n_polyhedra), h.n_facets)
    # One stable sort groups facets by polyhedron, each in decreasing value.
    ranked = (np.lexsort((-vals, block_id)) - np.repeat(off[:-1], h.n_facets)).tolist()
    sigmas = [ranked[off[i]:off[i + 1]] for i in range(h.n_polyhedra)]
    order = np.argsort(-np.maximum.reduceat(vals, off[:-1]), kind="stable").tolist()
    inverse = np.argsort(order).tolist()
    for combo in itertools.product(*[sigmas[i] for i in order]):
        yield tuple(combo[k] for k in inverse)


def assignment_count(h: PwaBarrier) -> int:
    return math.prod(h.n_facets)


# -- filter -----------------------------------------------------------------


@dataclass
class FilterResult:
    feasible: bool
    u: Optional[np.ndarray]
    assignment: Optional[Assignment]
    objective: float
    qp_count: int
    solve_time_us: float = 0.0
    margins: Optional[np.ndarray] = None
    method: str = "heuristic"

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "u": None if self.u is None else self.u.tolist(),
            "assignment": None if self.assignment is None else list(self.assignment),
            "objective": self.objective,
            "qp_count": self.qp_count,
            "solve_time_us": self.solve_time_us,
            "margins": None if self.margins is None else self.margins.tolist(),
            "method": self.method,
        }


@dataclass
class _StepData:
    CB: np.ndarray  # c_ij^T B(x), one row per facet
    rhs: np.ndarray  # q_ij - c_ij^T A(x)
    tightened: TightenedConstraints


class SafetyFilter:
    """Safety filter for one barrier, dynamics, noise model and configuration.

    ``noise`` is the model the filter assumes.  Pass ``dataset`` (an
    ``Empirical`` model) instead to use the order-statistic estimator.
    """

    def __init__(self, barrier: PwaBarrier, dynamics: Dynamics,
                 noise: nz.NoiseModel | None, cfg: FilterConfig,
                 dataset: Optional[nz.Empirical] = None,
                 tol: qp.Tolerances = qp.DEFAULT_TOL):
        if barrier.ns != dynamics.ns:
            raise ConfigError(f"barrier dimension {barrier.ns} != state dimension {dynamics.ns}")
        self.barrier = barrier
        self.dynamics = dynamics
        self.noise = noise
        self.cfg = cfg
        self.tol = tol
        self.dd = DataDrivenState.build(barrier, dataset, cfg, dynamics) if dataset is not None else None
        if self.dd is None and (noise is None or isinstance(noise, nz.Empirical)):
            raise ConfigError("pass an analytic noise model or a dataset")
        self._cached: Optional[TightenedConstraints] = None
        cacheable = self.dd is None or self.dd.cached_terms is not None
        if dynamics.state_independent_noise and cfg.alpha == 0 and cacheable:
            self._cached = tightened_bounds(barrier, np.zeros(barrier.ns), noise, cfg,
                                            self.dd, dynamics)
        na = dynamics.na
        self._box_G, self._box_h = qp.stack_constraints(
            np.zeros((0, na)), np.zeros(0), dynamics.u_lower, dynamics.u_upper
        )

    def tightened(self, x) -> TightenedConstraints:
        if self._cached is not None and not self.cfg.recompute_each_step:
            return self._cached
        return tightened_bounds(self.barrier, x, self.noise, self.cfg, self.dd, self.dynamics)

    def _prepare(self, x) -> _StepData:
        tc = self.tightened(x)
        A = self.dynamics.drift(x)
        B = self.dynamics.input_map(x)
        C = self.barrier.C_all
        return _StepData(C @ B, tc.q - C @ A, tc)

    def _solve(self, data: _StepData, rows: np.ndarray, u_base: np.ndarray) -> qp.QpSolution:
        G = np.concatenate([data.CB[rows], self._box_G])
        h = np.concatenate([data.rhs[rows], self._box_h])
        return qp.solve_stacked(G, h, u_base, self.tol)

    def qp_problem(self, x, u_base, j) -> qp.QpProblem:
        """The projection problem for assignment ``j`` at state ``x``."""
        j = check_assignment(self.barrier, j)
        data = self._prepare(np.asarray(x, dtype=float))
        rows = data.tightened.rows(j)
        return qp.QpProblem(u_base, data.CB[rows], data.rhs[rows],
                            self.dynamics.u_lower, self.dynamics.u_upper)

    def margins(self, x, u) -> np.ndarray:
        """``c_ij . f(x, u) - q_ij(x)`` for every facet."""
        x = np.asarray(x, dtype=float)
        return self.barrier.C_all @ self.dynamics.f(x, u) - self.tightened(x).q

    def _result(self, data, sol, j, count, t0, method):
        u = sol.u_star
        margins = data.CB @ u - data.rhs
        return FilterResult(True, u, j, sol.objective, count,
                            (time.perf_counter() - t0) * 1e6, margins, method)

    def step_heuristic(self, x, u_base, max_iters: Optional[int] | str = "config") -> FilterResult:
        t0 = time.perf_counter()
        x = np.asarray(x, dtype=float)
        u_base = np.asarray(u_base, dtype=float)
        cap = self.cfg.max_inner_iters if max_iters == "config" else max_iters
        data = self._prepare(x)
        anchor = x if self.cfg.order_anchor == "current" else self.dynamics.f(x, u_base)
        count = 0
        for j in candidate_order(self.barrier, anchor):
            if cap is not None and count >= cap:
                break
            count += 1
            sol = self._solve(data, data.tightened.rows(j), u_base)
            if sol.optimal:
                return self._result(data, sol, j, count, t0, "heuristic")
        return FilterResult(False, None, None, math.inf, count,
                            (time.perf_counter() - t0) * 1e6, None, "heuristic")

    def step_exact(self, x, u_base, method: str = "auto",
                   cap: int = ENUMERATION_CAP) -> FilterResult:
        """Cheapest feasible projection over all assignments.

        ``method`` is ``"enumerate"`` (every assignment, refused above
        ``cap``), ``"bnb"`` (branch-and-bound over polyhedra) or ``"auto"``
        (enumerate under the cap, branch-and-bound otherwise).
        """
        if method not in ("auto", "enumerate", "bnb"):
            raise ValueError(f"unknown exact method {method!r}")
        total = assignment_count(self.barrier)
        if method == "enumerate" and total > cap:
            raise ConfigError(
                f"{total} assignments exceed the enumeration cap {cap}; "
                "use the heuristic filter or method='bnb'"
            )
        if method == "auto":
            method = "enumerate" if total <= cap else "bnb"
        t0 = time.perf_counter()
        x = np.asarray(x, dtype=float)
        u_base = np.asarray(u_base, dtype=float)
        data = self._prepare(x)
        if method == "enumerate":
            return self._enumerate(data, u_base, t0)
        return self._branch_and_bound(data, u_base, t0)

    def _enumerate(self, data, u_base, t0) -> FilterResult:
        best, best_j, count = None, None, 0
        for j in itertools.product(*[range(nf) for nf in self.barrier.n_facets]):
            count += 1
            sol = self._solve(data, data.tightened.rows(j), u_base)
            if sol.optimal and (best is None or sol.objective < best.objective):
                best, best_j = sol, j
        if best is None:
            return FilterResult(False, None, None, math.inf, count,
                                (time.perf_counter() - t0) * 1e6, None, "enumerate")
        return self._result(data, best, best_j, count, t0, "enumerate")

    def _branch_and_bound(self, data, u_base, t0) -> FilterResult:
        # Nodes fix facets for a subset of polyhedra; the QP over fixed facets
        # is a relaxation.  A relaxed optimum that already clears some facet of
        # every free polyhedron is optimal for its subtree.
        h = self.barrier
        off = h.offsets
        feas = self.tol.feas_tol
        npoly = h.n_polyhedra
        best_obj, best_u, best_j = math.inf, None, None
        count = 0
        stack: list[dict[int, int]] = [{}]
        while stack:
            fixed = stack.pop()
            rows = np.array([off[i] + j for i, j in sorted(fixed.items())], dtype=np.intp)
            sol = self._solve(data, rows, u_base)
            count += 1
            if not sol.optimal or sol.objective >= best_obj:
                continue
            slack = data.CB @ sol.u_star - data.rhs
            worst_i, worst_val = -1, math.inf
            choice = {}
            for i in range(npoly):
                if i in fixed:
                    continue
                block = slack[off[i]:off[i + 1]]
                jbest = int(np.argmax(block))
                if block[jbest] >= -feas:
                    choice[i] = jbest
                elif block[jbest] < worst_val:
                    worst_i, worst_val = i, float(block[jbest])
            if worst_i < 0:
                best_obj, best_u = sol.objective, sol.u_star
                best_j = tuple(fixed[i] if i in fixed else choice[i] for i in range(npoly))
                continue
            block = slack[off[worst_i]:off[worst_i + 1]]
            # Depth-first; the least violated facet is explored first.
            for jj in np.argsort(block, kind="stable").tolist():
                child = dict(fixed)
                child[worst_i] = jj
                stack.append(child)
        if best_u is None:
            return FilterResult(False, None, None, math.inf, count,
                                (time.perf_counter() - t0) * 1e6, None, "bnb")
        margins = data.CB @ best_u - data.rhs
        return FilterResult(True, best_u, best_j, best_obj, count,
                            (time.perf_counter() - t0) * 1e6, margins, "bnb")


def filter_step_heuristic(h: PwaBarrier, x, u_base, dynamics: Dynamics, noise, cfg: FilterConfig,
                          dataset: Optional[nz.Empirical] = None) -> FilterResult:
    return SafetyFilter(h, dynamics, noise, cfg, dataset).step_heuristic(x, u_base)


def filter_step_exact(h: PwaBarrier, x, u_base, dynamics: Dynamics, noise, cfg: FilterConfig,
                      dataset: Optional[nz.Empirical] = None, method: str = "auto") -> FilterResult:
    return SafetyFilter(h, dynamics, noise, cfg, dataset).step_exact(x, u_base, method=method)
