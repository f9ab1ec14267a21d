"""``pwa-shield`` command line.

Exit codes: 0 success, 2 configuration error, 3 filter infeasibility at run
time (only when ``--fallback-hold-input`` is not given).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import compare, noise as nz, qp, sim
from .barrier import BarrierError
from .filter import ConfigError, allocate_risk, candidate_order, compute_tau
from .scenarios import DataDrivenSpec, Scenario, load_scenario

logger = logging.getLogger("pwa_shield")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
SAMPLE_WARN_THRESHOLD = 10**7


def _floats(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _scenario(args) -> Scenario:
    s = load_scenario(args.scenario)
    dataset = getattr(args, "dataset", None)
    if dataset is not None:
        data = nz.load_dataset(dataset, header=args.header)
        if s.config.confidence is None:
            raise ConfigError("a dataset needs a scenario with config.confidence set")
        s = replace(s, data_driven=DataDrivenSpec(dataset=data))
    s.validate()
    return s


def _dump(obj, path: Path | None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


# -- subcommands ------------------------------------------------------------


def cmd_simulate(args) -> int:
    s = _scenario(args)
    result = sim.estimate_exit_probability(
        s, args.runs, args.seed, args.method, horizon=args.horizon,
        parallel=args.parallel, fallback_hold=args.fallback_hold_input,
    )
    paths = sim.write_campaign(result, args.out, trajectories=args.trajectories or args.runs == 1)
    summary = result.summary()
    logger.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    print(f"{s.name}: P_hat = {summary['p_hat']:.4f} "
          f"[{summary['ci_low']:.4f}, {summary['ci_high']:.4f}] over {summary['runs']} runs")
    if result.infeasible_runs and not args.fallback_hold_input:
        print(f"filter infeasible in {result.infeasible_runs} run(s)", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_benchmark(args) -> int:
    s = _scenario(args)
    steps = compare.compare_methods(s, args.runs, args.seed, horizon=args.horizon)
    summary = compare.summarize(steps, cost_floor=args.cost_floor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "steps.csv").write_text(compare.steps_csv(steps))
    (out / "timing.csv").write_text(compare.timing_csv(steps))
    _dump(summary, out / "benchmark.json")
    t = summary["timing_us"]
    print(f"{summary['steps']} steps, {summary['retained_steps']} with cost >= {args.cost_floor:g}")
    print(f"suboptimality <= {compare.SUBOPT_TOL:g}: retained {summary['frac_retained_below_tol']:.4f}, "
          f"all {summary['frac_all_below_tol']:.4f}")
    print(f"heuristic QPs per step: mean {summary['mean_heuristic_qp_count']:.3f}, "
          f"max {summary['max_heuristic_qp_count']}")
    print(f"time [us]: heuristic mean {t['heuristic_mean']:.1f} max {t['heuristic_max']:.1f}; "
          f"exact mean {t['exact_mean']:.1f} max {t['exact_max']:.1f}; "
          f"speedup median {t['speedup_median']:.2f}")
    return EXIT_OK


def cmd_filter_step(args) -> int:
    s = _scenario(args)
    x = s.x0 if args.state is None else args.state
    if x.shape != (s.dynamics.ns,):
        raise ConfigError(f"state must have {s.dynamics.ns} entries")
    u_base = s.dynamics.clip_input(s.policy(x, 0)) if args.input is None else args.input
    if u_base.shape != (s.dynamics.na,):
        raise ConfigError(f"input must have {s.dynamics.na} entries")
    filt = s.make_filter(dataset=sim.run_dataset(s, args.seed))
    res = filt.step_heuristic(x, u_base) if args.method == "heuristic" else filt.step_exact(x, u_base)
    doc = res.to_dict()
    doc.pop("solve_time_us")
    doc["state"] = x.tolist()
    doc["u_base"] = u_base.tolist()
    _dump(doc, None)
    if args.dump_qp is not None:
        j = res.assignment
        if j is None:
            anchor = x if filt.cfg.order_anchor == "current" else filt.dynamics.f(x, u_base)
            j = next(candidate_order(filt.barrier, anchor))
        _dump({"assignment": list(j), "problem": filt.qp_problem(x, u_base, j).to_dict()},
              Path(args.dump_qp))
    return EXIT_OK if res.feasible else EXIT_INFEASIBLE


def cmd_min_samples(args) -> int:
    delta = nz.delta_from_epsilon(args.epsilon, args.horizon)
    delta_i = float(allocate_risk(delta, args.n_polyhedra)[0])
    gamma = args.confidence / args.horizon if args.mode == "general" else args.confidence
    level = gamma / args.facets_total
    d_min = nz.min_samples(level, delta_i)
    required = nz.required_samples(level, delta_i)
    report = {
        "epsilon": args.epsilon,
        "horizon": args.horizon,
        "delta": delta,
        "delta_i": delta_i,
        "gamma": gamma,
        "gamma_per_facet": level,
        "d_min": d_min,
        "required_n": required,
    }
    if args.n is not None:
        report["n"] = args.n
        report["tau"] = compute_tau(gamma, args.facets_total, args.n, delta_i) if args.n >= required else None
    if args.json:
        _dump(report, None)
    else:
        print(f"delta      = {delta:.10g}")
        print(f"delta_i    = {delta_i:.10g}  ({args.n_polyhedra} polyhedra)")
        print(f"gamma      = {gamma:.10g}  ({args.mode})")
        print(f"d_min      = {d_min:.6f}")
        print(f"required n = {required}")
        if args.n is not None:
            tau = report["tau"]
            print(f"tau(n={args.n}) = {tau if tau is not None else 'undefined (n too small)'}")
    if required > SAMPLE_WARN_THRESHOLD:
        logger.warning("required sample size %d exceeds %d", required, SAMPLE_WARN_THRESHOLD)
    return EXIT_OK


def cmd_validate_scenario(args) -> int:
    s = load_scenario(args.scenario)
    warnings = s.validate()
    for w in warnings:
        logger.warning(w)
    print(f"{s.name}: ok ({s.barrier.n_polyhedra} polyhedra, {s.barrier.n_facets_total} facets, "
          f"N={s.horizon}, eps={s.config.epsilon:g}, {len(warnings)} warning(s))")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pwa-shield",
                                description="Probabilistic safety filters for piecewise affine barriers.")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(sp, dataset=True):
        sp.add_argument("--scenario", required=True,
                        help="scenario JSON file or packaged fixture name (corridor, obstacle_course, ...)")
        if dataset:
            sp.add_argument("--dataset", type=Path, help="CSV of noise samples for data-driven filtering")
            sp.add_argument("--header", action="store_true", help="the dataset CSV has a header row")

    sp = sub.add_parser("simulate", help="Monte Carlo exit-probability campaign")
    scenario_args(sp)
    sp.add_argument("--runs", type=_positive_int, default=1000)
    sp.add_argument("--seed", type=int, default=0, help="base seed; runs use seed .. seed+runs-1")
    sp.add_argument("--method", choices=sim.METHODS, default="heuristic")
    sp.add_argument("--horizon", type=_positive_int)
    sp.add_argument("--out", type=Path, default=Path("out"))
    sp.add_argument("--parallel", type=_positive_int, default=1, help="worker processes")
    sp.add_argument("--fallback-hold-input", action="store_true",
                    help="hold the previous input when the filter is infeasible instead of stopping")
    sp.add_argument("--trajectories", action="store_true", help="dump every trajectory as CSV")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("benchmark", help="heuristic versus exact filter on identical states")
    scenario_args(sp)
    sp.add_argument("--runs", type=_positive_int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--horizon", type=_positive_int)
    sp.add_argument("--cost-floor", type=float, default=compare.COST_FLOOR)
    sp.add_argument("--out", type=Path, default=Path("out"))
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("filter-step", help="filter one input at one state")
    scenario_args(sp)
    sp.add_argument("--state", type=_floats, help="state, default the scenario's x0")
    sp.add_argument("--input", type=_floats, help="base input, default the scenario's policy")
    sp.add_argument("--method", choices=["heuristic", "exact"], default="heuristic")
    sp.add_argument("--seed", type=int, default=0, help="dataset seed in data-driven mode")
    sp.add_argument("--dump-qp", metavar="FILE", help="write the selected QP (or the first candidate) as JSON")
    sp.set_defaults(func=cmd_filter_step)

    sp = sub.add_parser("min-samples", help="sample-size requirement of the order-statistic estimator")
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--horizon", type=_positive_int, required=True)
    sp.add_argument("--confidence", type=float, required=True, help="overall confidence parameter")
    sp.add_argument("--n-polyhedra", type=_positive_int, default=1)
    sp.add_argument("--facets-total", type=_positive_int, default=1)
    sp.add_argument("--mode", choices=["state_independent", "general"], default="state_independent")
    sp.add_argument("--n", type=_positive_int, help="report the order-statistic rank for this n")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_min_samples)

    sp = sub.add_parser("validate-scenario", help="check a scenario file")
    sp.add_argument("--scenario", required=True)
    sp.set_defaults(func=cmd_validate_scenario)
    return p


def main(argv=None) -> int:
    level = os.environ.get("PWA_SHIELD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, nz.NoiseError, BarrierError, qp.QpError, FileNotFoundError,
            ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
