"""Heuristic versus exact filtering on identical states.

States come from heuristic closed-loop rollouts.  At each visited state both
solvers filter the same base input, so costs and timings are paired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .scenarios import Scenario
from .sim import _csv_text, rollout, run_dataset

COST_FLOOR = 1e-2
SUBOPT_TOL = 1e-7


@dataclass
class StepComparison:
    seed: int
    k: int
    heur_feasible: bool
    exact_feasible: bool
    heur_objective: float
    exact_objective: float
    heur_qp_count: int
    exact_qp_count: int
    heur_us: float
    exact_us: float

    @property
    def suboptimality(self) -> float:
        """``(v_heur - v_min) / v_min``; 0 when both are equal, inf when only the heuristic fails."""
        if not self.exact_feasible:
            return 0.0 if not self.heur_feasible else math.nan
        if not self.heur_feasible:
            return math.inf
        gap = self.heur_objective - self.exact_objective
        if gap <= 0.0:
            return 0.0
        return gap / self.exact_objective if self.exact_objective > 0 else math.inf

    @property
    def speedup(self) -> float:
        return self.exact_us / self.heur_us if self.heur_us > 0 else math.nan


def compare_methods(scenario: Scenario, runs: int, base_seed: int = 0,
                    horizon: Optional[int] = None,
                    heuristic_iters: Optional[int] | str = "config") -> list[StepComparison]:
    out = []
    shared = scenario.make_filter() if scenario.data_driven is None else None
    for seed in range(base_seed, base_seed + runs):
        rec = rollout(scenario, seed, "heuristic", horizon, fallback_hold=True, safety_filter=shared)
        filt = shared or scenario.make_filter(dataset=run_dataset(scenario, seed))
        for k in range(len(rec.statuses)):
            x, u_base = rec.states[k], rec.base_inputs[k]
            a = filt.step_heuristic(x, u_base, max_iters=heuristic_iters)
            e = filt.step_exact(x, u_base)
            out.append(StepComparison(seed, k, a.feasible, e.feasible, a.objective, e.objective,
                                      a.qp_count, e.qp_count, a.solve_time_us, e.solve_time_us))
    return out


def summarize(steps: list[StepComparison], cost_floor: float = COST_FLOOR,
              tol: float = SUBOPT_TOL) -> dict:
    sub = np.array([s.suboptimality for s in steps])
    exact_obj = np.array([s.exact_objective for s in steps])
    retained = exact_obj >= cost_floor
    both = np.array([s.heur_feasible and s.exact_feasible for s in steps])
    dominance = np.array([s.exact_objective <= s.heur_objective * (1 + 1e-12) + 1e-15
                          for s in steps if s.heur_feasible and s.exact_feasible])
    heur_us = np.array([s.heur_us for s in steps])
    exact_us = np.array([s.exact_us for s in steps])
    speed = exact_us / np.where(heur_us > 0, heur_us, np.nan)
    qp = np.array([s.heur_qp_count for s in steps])

    def frac(mask):
        return float(np.mean(mask)) if mask.size else math.nan

    return {
        "steps": len(steps),
        "retained_steps": int(retained.sum()),
        "cost_floor": cost_floor,
        "subopt_tol": tol,
        "frac_retained_below_tol": frac(sub[retained] <= tol),
        "frac_all_below_tol": frac(sub <= tol),
        "frac_exact_dominates": frac(dominance),
        "both_feasible_steps": int(both.sum()),
        "mean_heuristic_qp_count": float(qp.mean()) if qp.size else math.nan,
        "max_heuristic_qp_count": int(qp.max()) if qp.size else 0,
        "timing_us": {
            "heuristic_mean": float(heur_us.mean()) if heur_us.size else math.nan,
            "heuristic_max": float(heur_us.max()) if heur_us.size else math.nan,
            "exact_mean": float(exact_us.mean()) if exact_us.size else math.nan,
            "exact_max": float(exact_us.max()) if exact_us.size else math.nan,
            "speedup_median": float(np.nanmedian(speed)) if speed.size else math.nan,
            "speedup_p10": float(np.nanpercentile(speed, 10)) if speed.size else math.nan,
            "speedup_p90": float(np.nanpercentile(speed, 90)) if speed.size else math.nan,
        },
    }


STEP_COLUMNS = ["seed", "k", "heur_feasible", "exact_feasible", "heur_objective",
                "exact_objective", "suboptimality", "heur_qp_count", "exact_qp_count"]


def steps_csv(steps: list[StepComparison]) -> str:
    return _csv_text(STEP_COLUMNS, ([s.seed, s.k, int(s.heur_feasible), int(s.exact_feasible),
                                     repr(s.heur_objective), repr(s.exact_objective),
                                     repr(s.suboptimality), s.heur_qp_count, s.exact_qp_count]
                                    for s in steps))


def timing_csv(steps: list[StepComparison]) -> str:
    return _csv_text(["seed", "k", "heur_us", "exact_us", "speedup"],
                     ([s.seed, s.k, s.heur_us, s.exact_us, s.speedup] for s in steps))
