"""Command line interface: ``msmtrial {design,simulate,analyze,combine,recalc}``.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import load_cohort
from .design import combine_stages, conditional_level, stage_scores
from .ellipse import ellipse_plot_data
from .errors import ConfigError, NumericalError, UnreachablePowerError
from .invertibility import invertibility_report
from .io import load_design, load_scenario, write_json
from .planning import PowerEngine, accrual_recalc, planning_moments, required_sample_size
from .simulation import ADAPTIVE, ScenarioResult, progress_printer, run_outcomes, summarize
from .stats import RankDeficientWarning, stage_increment, stage_statistic

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

POWER_CURVE_POINTS = 9


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _emit(report: dict, out) -> None:
    if out:
        write_json(report, out)
    print(json.dumps(report, indent=2))


def cmd_design(args) -> int:
    design, assumptions, events, _ = load_design(args.design)
    moments = planning_moments(assumptions, events, design)
    boundaries = design.boundaries()
    report = {
        "boundaries": boundaries.to_dict(),
        "moments": moments.to_dict(),
        "invertibility": invertibility_report(assumptions.model, events).to_dict(),
    }
    try:
        n = required_sample_size(moments, design, design.target_power, draws=args.draws)
    except UnreachablePowerError as exc:
        report["error"] = str(exc)
        _emit(report, args.out)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    engine = PowerEngine(moments, boundaries, draws=args.draws)
    grid = np.unique(np.round(np.linspace(0.5, 1.5, POWER_CURVE_POINTS) * n).astype(int))
    report["n"] = n
    report["target_power"] = design.target_power
    report["power_curve"] = [[int(m), engine.power(m)] for m in grid if m >= 1]
    if args.n is not None:
        report["power_at_n"] = {"n": args.n, "power": engine.power(args.n)}
    _emit(report, args.out)
    return EXIT_OK


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_simulate(args) -> int:
    config = load_scenario(args.scenario, seed=args.seed, replicates=args.replicates)
    progress = None if args.quiet else progress_printer(config.name or Path(args.scenario).stem, args.progress_every)
    outcomes = run_outcomes(config, workers=args.workers, progress=progress)
    result = summarize(config, outcomes)
    detail = {
        "scenario": str(args.scenario),
        "seed": config.seed,
        "n": config.n,
        "mode": config.mode,
        "result": result.to_dict(),
        "replicates": [
            {
                "index": o.index,
                "p_values": list(o.p_values),
                "rejected": o.rejected,
                "stage": o.stage,
                "accrual": o.accrual,
                "flagged": o.flagged,
                **({"fixed_rejected": o.fixed_rejected, "a_add": o.a_add} if config.mode == ADAPTIVE else {}),
            }
            for o in outcomes
        ],
    }
    if args.out:
        out = Path(args.out)
        _write_rows(out.with_suffix(".csv"), ScenarioResult.CSV_COLUMNS, [result.csv_row()])
        write_json(detail, out.with_suffix(".json"))
    writer = csv.writer(sys.stdout)
    writer.writerow(ScenarioResult.CSV_COLUMNS)
    writer.writerow(result.csv_row())
    return EXIT_OK


def _stage_times(design, stage: int, t_override):
    if not 1 <= stage <= design.m:
        raise ConfigError(f"stage must lie in 1..{design.m}")
    t_now = design.times[stage - 1] if t_override is None else float(t_override)
    t_prev = 0.0 if stage == 1 else design.times[stage - 2]
    if t_now <= t_prev:
        raise ConfigError(f"analysis time {t_now} must follow the previous analysis at {t_prev}")
    return t_prev, t_now


def analyze_stage(cohort, design, events, model, stage: int, prior_p=(), t=None):
    """``(report, StageResult, stage level)`` composed from library calls only."""
    prior_p = list(prior_p)
    if len(prior_p) != stage - 1:
        raise ConfigError(f"stage {stage} needs {stage - 1} prior stagewise p-value(s), got {len(prior_p)}")
    t_prev, t_now = _stage_times(design, stage, t)
    if cohort.n == 0:
        raise ConfigError("cohort is empty")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RankDeficientWarning)
        du, dv = stage_increment(cohort, events, t_prev, t_now)
        result = stage_statistic(du, dv, stage=stage)
    boundaries = design.boundaries()
    level = conditional_level(boundaries, stage_scores(prior_p)) if prior_p else float(boundaries.p[0])
    combined = combine_stages(prior_p + [max(result.p_value, 1e-300)], boundaries)
    report = {
        "stage": stage,
        "t_prev": t_prev,
        "t": t_now,
        "n": cohort.n,
        **result.to_dict(),
        "stage_level": level,
        "decision": combined.decision,
        "decision_stage": combined.stage,
        "combined_z": combined.combined.tolist(),
        "next_level": combined.next_level,
        "invertibility_verdict": invertibility_report(model, events).verdict if model is not None else None,
        "warnings": [str(w.message) for w in caught],
    }
    return report, result, level


def cmd_analyze(args) -> int:
    design, assumptions, events, _ = load_design(args.design)
    cohort = load_cohort(args.cohort)
    report, result, level = analyze_stage(cohort, design, events, assumptions.model, args.stage, args.prior_p or (), args.t)
    if args.plot:
        if len(events) != 2 or result.rank_deficient:
            report["plot"] = "skipped: ellipse needs two events and a nonsingular covariance increment"
        else:
            plot = ellipse_plot_data(result.du, result.dv, cohort.n, level, args.stage, result.statistic)
            plot.write_csv(args.plot)
            report["plot"] = str(args.plot)
            report["point_rejects"] = plot.rejects
    _emit(report, args.out)
    return EXIT_OK


def cmd_combine(args) -> int:
    design, _, _, _ = load_design(args.design)
    res = combine_stages(args.p, design.boundaries())
    report = {
        "p_values": list(args.p),
        "stage_levels": res.stage_levels.tolist(),
        "combined_z": res.combined.tolist(),
        "boundaries_z": design.boundaries().z.tolist(),
        "decision": res.decision,
        "stage": res.stage,
        "next_level": res.next_level,
    }
    _emit(report, args.out)
    return EXIT_OK


def cmd_recalc(args) -> int:
    if args.a_min > args.a_max:
        raise ConfigError("need a_min <= a_max")
    design, assumptions, events, _ = load_design(args.design)
    if design.m != 2:
        raise ConfigError("accrual recalculation needs a two-stage design")
    cohort = load_cohort(args.cohort)
    if cohort.n == 0:
        raise ConfigError("interim cohort is empty: no estimable rates")
    t1 = design.times[0]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        du, dv = stage_increment(cohort, events, 0.0, t1)
        stage1 = stage_statistic(du, dv, stage=1)
        p1 = max(stage1.p_value, 1e-300)
        report = {"stage1": stage1.to_dict()}
        if p1 <= design.boundaries().p[0]:
            report["decision"] = "reject at stage 1; no recalculation"
        else:
            z1 = float(stage_scores([p1])[0])
            decision = accrual_recalc(
                cohort, design, args.a_min, args.a_max, z1, events, fallback=assumptions.model,
                dropout_rate=assumptions.dropout_rate,
            )
            report["decision"] = "continue"
            report["recalc"] = decision.to_dict()
    report["warnings"] = [str(w.message) for w in caught]
    _emit(report, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msmtrial", description="Adaptive multi-state trial design, simulation and analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("design", help="boundaries, planning moments and required sample size")
    p.add_argument("design", help="design JSON file")
    p.add_argument("--n", type=int, help="also report the power at this total sample size")
    p.add_argument("--draws", type=int, default=10**6, help="Monte Carlo draws for power (default 10^6)")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("simulate", help="Monte Carlo rejection rates for a scenario")
    p.add_argument("scenario", help="scenario JSON file")
    p.add_argument("--seed", type=int, required=True, help="master seed (mandatory)")
    p.add_argument("--replicates", type=int, help="number of simulated trials (default: file value or 10^4)")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.add_argument("--out", help="output prefix for <out>.csv (summary row) and <out>.json (per-replicate detail)")
    p.add_argument("--progress-every", type=int, default=1000)
    p.add_argument("--quiet", action="store_true", help="no progress on standard error")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="stagewise statistic, decision and ellipse plot data for a cohort")
    p.add_argument("cohort", help="cohort transitions CSV (roster next to it)")
    p.add_argument("design", help="design JSON file")
    p.add_argument("--stage", type=int, default=1)
    p.add_argument("--t", type=float, help="analysis time (default: the design's time for this stage)")
    p.add_argument("--prior-p", type=float, nargs="*", help="stagewise p-values of earlier stages")
    p.add_argument("--plot", help="write ellipse plot data CSV (x, y, series) here")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("combine", help="sequential decision for given stagewise p-values")
    p.add_argument("design", help="design JSON file")
    p.add_argument("--p", type=float, nargs="+", required=True, help="stagewise p-values")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("recalc", help="interim accrual recalculation")
    p.add_argument("cohort", help="interim cohort transitions CSV")
    p.add_argument("design", help="two-stage design JSON file with accrual rate")
    p.add_argument("--a-min", type=float, required=True)
    p.add_argument("--a-max", type=float, required=True)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_recalc)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
