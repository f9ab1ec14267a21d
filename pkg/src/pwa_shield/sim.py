"""Seeded closed-loop rollouts and Monte Carlo exit-probability campaigns.

Each run draws its disturbances from ``default_rng([seed, NOISE_STREAM])``
and, in data-driven mode, its filter dataset from
``default_rng([seed, DATASET_STREAM])``.  A run therefore depends only on
its own seed, so campaigns give the same per-run results for any worker
count, and all methods see the same disturbances for a given seed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import binomtest

from . import noise as nz
from .filter import FilterResult, SafetyFilter
from .scenarios import Scenario

logger = logging.getLogger(__name__)

NOISE_STREAM = 0
DATASET_STREAM = 1
METHODS = ("heuristic", "exact", "none")

# Per-step status codes in trajectory records.
OK = "ok"
INFEASIBLE = "infeasible"
HELD = "held"
UNFILTERED = "unfiltered"


@dataclass
class TrajectoryRecord:
    seed: int
    method: str
    states: np.ndarray  # (steps + 1, ns), x_0 first
    inputs: np.ndarray  # (steps, na), applied inputs
    base_inputs: np.ndarray  # (steps, na)
    assignments: list  # per step, a tuple or None
    statuses: list
    solve_us: np.ndarray
    qp_counts: np.ndarray
    exited: bool
    first_exit_step: int  # -1 when the run stayed safe
    infeasible_step: int  # first step with an infeasible filter, -1 if none
    completed: bool  # False when the run stopped early on infeasibility

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    def deterministic_row(self) -> list:
        return [self.seed, int(self.exited), self.first_exit_step, self.infeasible_step,
                int(self.qp_counts.sum()), self.steps]

    def timing_row(self) -> list:
        if self.solve_us.size == 0:
            return [self.seed, 0.0, 0.0]
        return [self.seed, float(self.solve_us.mean()), float(self.solve_us.max())]


def first_exit(barrier, states: np.ndarray) -> int:
    """Index of the first unsafe state among ``states[1:]`` (1-based step), or -1."""
    if states.shape[0] < 2:
        return -1
    safe = barrier.evaluate_many(states[1:]) >= 0.0
    bad = np.flatnonzero(~safe)
    return int(bad[0]) + 1 if bad.size else -1


def noise_sequence(scenario: Scenario, seed: int, horizon: int) -> np.ndarray:
    """The ``(horizon, nxi)`` disturbance realisation for ``seed``."""
    rng = np.random.default_rng([seed, NOISE_STREAM])
    U = nz.uniforms(rng, (horizon, scenario.sim_noise.dim))
    return scenario.sim_noise.from_uniforms(U)


def run_dataset(scenario: Scenario, seed: int) -> Optional[nz.Empirical]:
    """The filter dataset for ``seed`` in data-driven mode, else ``None``."""
    if scenario.data_driven is None:
        return None
    rng = np.random.default_rng([seed, DATASET_STREAM])
    return scenario.data_driven.draw(rng, scenario.sim_noise)


def _filter_for(scenario: Scenario, seed: int, method: str,
                shared: Optional[SafetyFilter]) -> Optional[SafetyFilter]:
    if method == "none":
        return None
    if scenario.data_driven is not None and scenario.data_driven.dataset is None:
        return scenario.make_filter(dataset=run_dataset(scenario, seed))
    if shared is not None:
        return shared
    return scenario.make_filter(dataset=run_dataset(scenario, seed))


def rollout(scenario: Scenario, seed: int, method: str = "heuristic",
            horizon: Optional[int] = None, fallback_hold: bool = False,
            stop_on_exit: bool = False, policy=None,
            safety_filter: Optional[SafetyFilter] = None) -> TrajectoryRecord:
    """Simulate one closed-loop trajectory.

    ``method`` picks the filter (``"none"`` applies the base policy
    unmodified).  On an infeasible filter step the run stops, unless
    ``fallback_hold`` is set, in which case the previous applied input (zero
    at the first step) is held and the run continues.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    N = scenario.horizon if horizon is None else int(horizon)
    dyn = scenario.dynamics
    pol = scenario.policy if policy is None else policy
    filt = _filter_for(scenario, seed, method, safety_filter)
    xi = noise_sequence(scenario, seed, N)

    states = np.empty((N + 1, dyn.ns))
    inputs = np.empty((N, dyn.na))
    base = np.empty((N, dyn.na))
    solve_us = np.zeros(N)
    qp_counts = np.zeros(N, dtype=np.int64)
    assignments: list = []
    statuses: list = []
    states[0] = scenario.x0
    u_prev = np.zeros(dyn.na)
    infeasible_step = -1
    completed = True
    applied = 0
    for k in range(N):
        x = states[k]
        u_base = dyn.clip_input(pol(x, k))
        base[k] = u_base
        if filt is None:
            u, status, assign = u_base, UNFILTERED, None
        else:
            res: FilterResult = (filt.step_heuristic(x, u_base) if method == "heuristic"
                                 else filt.step_exact(x, u_base))
            solve_us[k] = res.solve_time_us
            qp_counts[k] = res.qp_count
            if res.feasible:
                u, status, assign = res.u, OK, res.assignment
            else:
                if infeasible_step < 0:
                    infeasible_step = k
                if not fallback_hold:
                    completed = False
                    statuses.append(INFEASIBLE)
                    assignments.append(None)
                    break
                u, status, assign = dyn.clip_input(u_prev), HELD, None
        inputs[k] = u
        statuses.append(status)
        assignments.append(assign)
        states[k + 1] = dyn.step(x, u, xi[k])
        applied = k + 1
        u_prev = u
        if stop_on_exit and not scenario.barrier.is_safe(states[k + 1]):
            break
    n_rec = len(statuses)
    states = states[: applied + 1]
    exit_step = first_exit(scenario.barrier, states)
    return TrajectoryRecord(
        seed=int(seed),
        method=method,
        states=states,
        inputs=inputs[:applied],
        base_inputs=base[:n_rec],
        assignments=assignments,
        statuses=statuses,
        solve_us=solve_us[:n_rec],
        qp_counts=qp_counts[:n_rec],
        exited=exit_step >= 0,
        first_exit_step=exit_step,
        infeasible_step=infeasible_step,
        completed=completed,
    )


# -- campaigns --------------------------------------------------------------


@dataclass
class CampaignResult:
    scenario: str
    method: str
    base_seed: int
    records: list
    confidence_level: float = 0.95

    @property
    def runs(self) -> int:
        return len(self.records)

    @property
    def exits(self) -> int:
        return sum(r.exited for r in self.records)

    @property
    def infeasible_runs(self) -> int:
        return sum(r.infeasible_step >= 0 for r in self.records)

    @property
    def p_hat(self) -> float:
        return self.exits / self.runs

    @property
    def interval(self) -> tuple[float, float]:
        return wilson_interval(self.exits, self.runs, self.confidence_level)

    def summary(self) -> dict:
        lo, hi = self.interval
        return {
            "scenario": self.scenario,
            "method": self.method,
            "runs": self.runs,
            "base_seed": self.base_seed,
            "exits": self.exits,
            "p_hat": self.p_hat,
            "ci_level": self.confidence_level,
            "ci_low": lo,
            "ci_high": hi,
            "infeasible_runs": self.infeasible_runs,
            "total_steps": int(sum(r.steps for r in self.records)),
            "mean_qp_count": _mean_qp(self.records),
        }

    def timing_summary(self) -> dict:
        t = np.concatenate([r.solve_us for r in self.records]) if self.records else np.zeros(0)
        if t.size == 0:
            return {"unit": "us", "steps": 0}
        p50, p90, p99 = np.percentile(t, [50, 90, 99])
        return {"unit": "us", "steps": int(t.size), "mean": float(t.mean()),
                "p50": float(p50), "p90": float(p90), "p99": float(p99), "max": float(t.max())}


def _mean_qp(records) -> float:
    counts = [r.qp_counts for r in records if r.qp_counts.size]
    if not counts:
        return 0.0
    return float(np.concatenate(counts).mean())


def wilson_interval(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    if trials < 1:
        raise ValueError("need at least one trial")
    ci = binomtest(successes, trials).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def _run_chunk(args) -> list:
    scenario, seeds, method, horizon, fallback_hold, stop_on_exit = args
    shared = None
    if method != "none" and (scenario.data_driven is None or scenario.data_driven.dataset is not None):
        shared = _filter_for(scenario, seeds[0], method, None) if seeds else None
    return [rollout(scenario, s, method, horizon, fallback_hold, stop_on_exit,
                    safety_filter=shared) for s in seeds]


def estimate_exit_probability(scenario: Scenario, runs: int, base_seed: int = 0,
                              method: str = "heuristic", horizon: Optional[int] = None,
                              parallel: int = 1, fallback_hold: bool = False,
                              stop_on_exit: bool = False) -> CampaignResult:
    """Run seeds ``base_seed .. base_seed + runs - 1`` and count exits."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    seeds = list(range(base_seed, base_seed + runs))
    if parallel <= 1:
        records = _run_chunk((scenario, seeds, method, horizon, fallback_hold, stop_on_exit))
    else:
        n_chunks = min(runs, 4 * parallel)
        chunks = [seeds[i::n_chunks] for i in range(n_chunks)]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            parts = pool.map(_run_chunk, [(scenario, c, method, horizon, fallback_hold, stop_on_exit)
                                          for c in chunks])
            records = [r for part in parts for r in part]
        records.sort(key=lambda r: r.seed)
    return CampaignResult(scenario.name, method, base_seed, records)


# -- output -----------------------------------------------------------------

RUN_COLUMNS = ["seed", "exit", "first_exit_step", "infeasible_step", "qp_count", "steps"]
TIMING_COLUMNS = ["seed", "mean_solve_us", "max_solve_us"]


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def runs_csv(result: CampaignResult) -> str:
    """Per-run outcomes; contains no timings so reruns are byte-identical."""
    return _csv_text(RUN_COLUMNS, (r.deterministic_row() for r in result.records))


def timing_csv(result: CampaignResult) -> str:
    return _csv_text(TIMING_COLUMNS, (r.timing_row() for r in result.records))


def trajectory_csv(rec: TrajectoryRecord) -> str:
    ns = rec.states.shape[1]
    na = rec.base_inputs.shape[1] if rec.base_inputs.ndim == 2 else 0
    header = (["k"] + [f"x{i}" for i in range(ns)] + [f"u{i}" for i in range(na)]
              + ["status", "assignment"])
    rows = []
    for k in range(rec.states.shape[0]):
        x = [repr(float(v)) for v in rec.states[k]]
        if k < len(rec.statuses):
            u = ([repr(float(v)) for v in rec.inputs[k]] if k < rec.steps else [""] * na)
            a = rec.assignments[k]
            rows.append([k, *x, *u, rec.statuses[k], "" if a is None else " ".join(map(str, a))])
        else:
            rows.append([k, *x, *([""] * na), "", ""])
    return _csv_text(header, rows)


def write_campaign(result: CampaignResult, out_dir, trajectories: bool = False) -> dict:
    """Write ``runs.csv``, ``summary.json``, ``timing.csv`` and ``timing.json``.

    Only the timing files vary between reruns.  Returns a map of written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "runs": out / "runs.csv",
        "summary": out / "summary.json",
        "timing": out / "timing.csv",
        "timing_summary": out / "timing.json",
    }
    paths["runs"].write_text(runs_csv(result))
    paths["summary"].write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    paths["timing"].write_text(timing_csv(result))
    paths["timing_summary"].write_text(json.dumps(result.timing_summary(), indent=2) + "\n")
    if trajectories:
        tdir = out / "trajectories"
        tdir.mkdir(exist_ok=True)
        for rec in result.records:
            (tdir / f"seed_{rec.seed}.csv").write_text(trajectory_csv(rec))
        paths["trajectories"] = tdir
    return paths
