"""Monte Carlo trial simulation: type I error, power and the adaptive accrual comparison.

Every replicate draws from its own counter-based stream ``(seed, index)``, so
results do not depend on execution order or worker count.  Patients are
recruited uniformly over the accrual period and allocated alternately to the
two groups.
"""

from __future__ import annotations

import math
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .cohort import Cohort, EventDefinition, pfs_os_events
from .design import Boundaries, DesignSpec, combine_stages, conditional_level, stage_scores
from .errors import ConfigError, PowerMonotonicityError, UnreachablePowerError
from .model import AccrualPlan, MultiStateModel
from .planning import PlanningAssumptions, accrual_recalc, planning_moments, required_sample_size
from .sampling import Transitions, make_rng, sample_transitions
from .stats import RankDeficientWarning, stage_statistic, statistics

FIXED = "fixed"
ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulated trial setting.

    ``model`` carries the true intensities and hazard ratios.  In adaptive
    mode ``planning_model`` supplies fallback rates for the recalculation and
    ``a_bounds`` the admissible accrual extensions after ``t_1``.
    """

    model: MultiStateModel
    plan: AccrualPlan
    design: DesignSpec
    n: int
    replicates: int
    seed: int
    mode: str = FIXED
    events: tuple[EventDefinition, ...] = field(default_factory=lambda: tuple(pfs_os_events()))
    a_bounds: tuple[float, float] | None = None
    planning_model: MultiStateModel | None = None
    dropout_rate: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("a seed is mandatory")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigError("sample size n must be a positive integer (empty cohort)")
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise ConfigError("replicates must be a positive integer")
        if self.mode not in (FIXED, ADAPTIVE):
            raise ConfigError(f"mode must be {FIXED!r} or {ADAPTIVE!r}")
        if self.mode == ADAPTIVE:
            if self.a_bounds is None:
                raise ConfigError("adaptive mode needs a_min and a_max")
            if self.design.m != 2:
                raise ConfigError("adaptive mode needs a two-stage design")
            if self.plan.rate is None:
                raise ConfigError("adaptive mode needs an accrual rate")
            lo, hi = self.a_bounds
            if not 0 <= lo <= hi:
                raise ConfigError("need 0 <= a_min <= a_max")
        if not self.dropout_rate >= 0:
            raise ConfigError("dropout rate must be nonnegative")
        object.__setattr__(self, "events", tuple(self.events))


@dataclass(frozen=True)
class ReplicateOutcome:
    """Result of one simulated trial (and, in adaptive mode, its fixed-design twin)."""

    index: int
    p_values: tuple[float, ...]
    rejected: bool
    stage: int
    accrual: float
    flagged: bool
    fixed_rejected: bool | None = None
    fixed_stage: int | None = None
    fixed_accrual: float | None = None
    a_add: float | None = None


def _draw_cohort(config: ScenarioConfig, rng, n: int, lo: float, hi: float, first_id: int, horizon: float):
    entry = np.sort(rng.uniform(lo, hi, n)) if n else np.zeros(0)
    group = (np.arange(n) + first_id) % 2
    if config.dropout_rate > 0:
        dropout = rng.exponential(1.0 / config.dropout_rate, n)
    else:
        dropout = np.full(n, math.inf)
    tr = sample_transitions(config.model, group, np.maximum(horizon - entry, 0.0), rng)
    return entry, group, dropout, tr


def _stack(parts) -> Cohort:
    entry = np.concatenate([p[0] for p in parts])
    group = np.concatenate([p[1] for p in parts])
    dropout = np.concatenate([p[2] for p in parts])
    offsets = np.cumsum([0] + [len(p[0]) for p in parts[:-1]])
    tr = Transitions(
        np.concatenate([p[3].patient + o for p, o in zip(parts, offsets)]),
        np.concatenate([p[3].time for p in parts]),
        np.concatenate([p[3].source for p in parts]),
        np.concatenate([p[3].target for p in parts]),
    )
    return Cohort(entry, group, dropout, tr)


def _stage_p_values(cohort: Cohort, events, times) -> tuple[list[float], bool]:
    flagged = False
    p_values = []
    prev_u = prev_v = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        for r, t in enumerate(times):
            u, v = statistics(cohort, events, t)
            du, dv = (u, v) if prev_u is None else (u - prev_u, v - prev_v)
            res = stage_statistic(du, dv, stage=r + 1)
            flagged |= res.rank_deficient
            # a p-value of exactly 0 is outside the combination domain
            p_values.append(max(res.p_value, 1e-300))
            prev_u, prev_v = u, v
    return p_values, flagged


def _first_rejection(p_values, boundaries: Boundaries) -> tuple[bool, int]:
    res = combine_stages(p_values, boundaries)
    return res.rejected, res.stage


def run_replicate(config: ScenarioConfig, index: int) -> ReplicateOutcome:
    """Simulate trial ``index`` of ``config``."""
    rng = make_rng(config.seed, index)
    design = config.design
    boundaries = design.boundaries()
    a = config.plan.duration
    if config.mode == FIXED:
        base = _draw_cohort(config, rng, config.n, 0.0, a, 0, design.times[-1])
        cohort = _stack([base])
        p_values, flagged = _stage_p_values(cohort, config.events, design.times)
        rejected, stage = _first_rejection(p_values, boundaries)
        accrual = a if stage == design.m else min(a, design.times[stage - 1])
        return ReplicateOutcome(index, tuple(p_values), rejected, stage, accrual, flagged)

    t1, t2 = design.times
    a_min, a_max = config.a_bounds
    f = config.plan.follow_up
    horizon = max(t1 + a_max + f, t2)
    base = _draw_cohort(config, rng, config.n, 0.0, a, 0, horizon)
    extra_end = t1 + a_max
    n_extra = int(round(config.plan.rate * max(extra_end - a, 0.0)))
    extra = _draw_cohort(config, rng, n_extra, a, extra_end, config.n, horizon)
    cohort = _stack([base])
    fixed_p, flagged = _stage_p_values(cohort, config.events, design.times)
    fixed_rejected, fixed_stage = _first_rejection(fixed_p, boundaries)
    fixed_accrual = a if fixed_stage == 2 else min(a, t1)

    p1 = fixed_p[0]
    if p1 <= boundaries.p[0]:
        return ReplicateOutcome(index, (p1,), True, 1, min(a, t1), flagged, fixed_rejected, fixed_stage, fixed_accrual, None)
    z1 = float(stage_scores([p1])[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        decision = accrual_recalc(
            cohort, design, a_min, a_max, z1, config.events, fallback=config.planning_model or config.model,
            dropout_rate=config.dropout_rate,
        )
    accrual = decision.accrual_duration
    full = _stack([base, extra])
    adapted = full.subset(full.entry <= accrual)
    p2s, flag2 = _stage_p_values(adapted, config.events, (t1, decision.final_time))
    p2 = p2s[1]
    rejected = p2 <= conditional_level(boundaries, [z1])
    return ReplicateOutcome(
        index, (p1, p2), bool(rejected), 2, accrual, flagged or flag2, fixed_rejected, fixed_stage, fixed_accrual, decision.a_add
    )


@dataclass(frozen=True)
class ScenarioResult:
    """Aggregate over replicates; ``wall_clock`` is informational and excluded from comparisons."""

    name: str
    replicates: int
    rejections: int
    stage_rejections: tuple[int, ...]
    flagged: int
    mean_accrual: float
    fixed_rejections: int | None = None
    fixed_mean_accrual: float | None = None
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def rate(self) -> float:
        return self.rejections / self.replicates

    @property
    def se(self) -> float:
        return math.sqrt(self.rate * (1.0 - self.rate) / self.replicates)

    @property
    def fixed_rate(self) -> float | None:
        return None if self.fixed_rejections is None else self.fixed_rejections / self.replicates

    @property
    def fixed_se(self) -> float | None:
        r = self.fixed_rate
        return None if r is None else math.sqrt(r * (1.0 - r) / self.replicates)

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "replicates": self.replicates,
            "rejections": self.rejections,
            "rate": self.rate,
            "se": self.se,
            "stage_rejections": list(self.stage_rejections),
            "flagged": self.flagged,
            "mean_accrual": self.mean_accrual,
        }
        if self.fixed_rejections is not None:
            out.update(fixed_rejections=self.fixed_rejections, fixed_rate=self.fixed_rate, fixed_se=self.fixed_se, fixed_mean_accrual=self.fixed_mean_accrual)
        return out

    CSV_COLUMNS = ("name", "replicates", "rate", "se", "stage_rejections", "flagged", "mean_accrual", "fixed_rate", "fixed_mean_accrual")

    def csv_row(self) -> list:
        return [
            self.name,
            self.replicates,
            f"{self.rate:.6f}",
            f"{self.se:.6f}",
            "/".join(map(str, self.stage_rejections)),
            self.flagged,
            f"{self.mean_accrual:.6f}",
            "" if self.fixed_rate is None else f"{self.fixed_rate:.6f}",
            "" if self.fixed_mean_accrual is None else f"{self.fixed_mean_accrual:.6f}",
        ]


def summarize(config: ScenarioConfig, outcomes: Sequence[ReplicateOutcome], wall_clock: float = 0.0) -> ScenarioResult:
    m = config.design.m
    stage_counts = [0] * m
    for o in outcomes:
        if o.rejected:
            stage_counts[o.stage - 1] += 1
    fixed = None
    fixed_acc = None
    if config.mode == ADAPTIVE:
        fixed = sum(bool(o.fixed_rejected) for o in outcomes)
        fixed_acc = float(np.mean([o.fixed_accrual for o in outcomes]))
    return ScenarioResult(
        config.name,
        len(outcomes),
        sum(o.rejected for o in outcomes),
        tuple(stage_counts),
        sum(o.flagged for o in outcomes),
        float(np.mean([o.accrual for o in outcomes])),
        fixed,
        fixed_acc,
        wall_clock,
    )


def _run_chunk(args):
    config, indices = args
    return [run_replicate(config, i) for i in indices]


def run_outcomes(config: ScenarioConfig, workers: int = 1, progress: Callable[[int, int], None] | None = None) -> list[ReplicateOutcome]:
    """All replicate outcomes in index order."""
    indices = list(range(config.replicates))
    if workers <= 1:
        out = []
        for i in indices:
            out.append(run_replicate(config, i))
            if progress is not None:
                progress(i + 1, config.replicates)
        return out
    chunk = max(1, len(indices) // (workers * 8))
    chunks = [indices[i : i + chunk] for i in range(0, len(indices), chunk)]
    out = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_run_chunk, [(config, c) for c in chunks]):
            out.extend(part)
            if progress is not None:
                progress(len(out), config.replicates)
    return out


def run_scenario(config: ScenarioConfig, workers: int = 1, progress: Callable[[int, int], None] | None = None) -> ScenarioResult:
    """Aggregate ``config.replicates`` simulated trials."""
    start = time.perf_counter()
    outcomes = run_outcomes(config, workers, progress)
    return summarize(config, outcomes, time.perf_counter() - start)


def rates_for_families(config: ScenarioConfig, outcomes: Sequence[ReplicateOutcome], families: Sequence[str]) -> dict:
    """Re-evaluate fixed-mode outcomes under other boundary families (same stagewise p-values)."""
    if config.mode != FIXED:
        raise ConfigError("family re-evaluation needs fixed-mode outcomes")
    out = {}
    for fam in families:
        design = replace(config.design, family=fam)
        b = design.boundaries()
        rejected = []
        for o in outcomes:
            rejected.append(_first_rejection(o.p_values, b))
        cfg = replace(config, design=design, name=f"{config.name}:{design.family}")
        outs = [
            replace(o, rejected=r, stage=s, accrual=config.plan.duration if s == design.m else min(config.plan.duration, design.times[s - 1]))
            for o, (r, s) in zip(outcomes, rejected)
        ]
        out[design.family] = summarize(cfg, outs)
    return out


def progress_printer(label: str, every: int = 1000):
    def report(done, total):
        if done % every == 0 or done == total:
            print(f"{label}: {done}/{total}", file=sys.stderr, flush=True)

    return report


@dataclass(frozen=True)
class CalibrationResult:
    n: int
    analytic_n: int | None
    power: float
    flagged: bool
    trace: tuple[tuple[int, float], ...]


def calibrate_sample_size(
    template: ScenarioConfig,
    target: float = 0.8,
    replicates: int | None = None,
    lower: int = 2,
    upper: int = 10**5,
    tolerance_se: float = 2.0,
) -> CalibrationResult:
    """Smallest ``n`` whose simulated power reaches ``target`` within Monte Carlo tolerance.

    The search is seeded by the analytic sample size and uses the same
    replicate streams for every ``n``.  A power estimate counts as reaching
    the target if it is at least ``target - tolerance_se * SE``.
    """
    if not 0 < target < 1:
        raise ConfigError("target power must lie in (0, 1)")
    reps = template.replicates if replicates is None else replicates
    tol = tolerance_se * math.sqrt(target * (1 - target) / reps)
    try:
        moments = planning_moments(PlanningAssumptions(template.model, template.plan, template.dropout_rate), template.events, template.design)
        analytic = required_sample_size(moments, template.design, target)
    except UnreachablePowerError:
        analytic = None
    trace: dict[int, float] = {}

    def power(n):
        if n not in trace:
            cfg = replace(template, n=int(n), replicates=reps)
            trace[n] = run_scenario(cfg).rate
            seen = sorted(trace.items())
            se2 = 2 * (tol / tolerance_se) ** 2
            for (n_a, p_a), (n_b, p_b) in zip(seen, seen[1:]):
                if p_a - p_b > 3.0 * math.sqrt(2 * se2):
                    raise PowerMonotonicityError(f"simulated power drops from {p_a:.4f} at n={n_a} to {p_b:.4f} at n={n_b}")
        return trace[n]

    def ok(n):
        return power(n) >= target - tol

    lo = lower
    if ok(lo):
        n = lo
    else:
        hi = max(lower + 1, analytic or 2 * lower)
        while not ok(hi):
            lo = hi
            hi *= 2
            if hi > upper:
                raise UnreachablePowerError(f"simulated power stays below {target} up to n={upper}")
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if ok(mid):
                hi = mid
            else:
                lo = mid
        n = hi
    flagged = analytic is not None and abs(n - analytic) > 0.2 * analytic
    return CalibrationResult(int(n), analytic, trace[n], flagged, tuple(sorted(trace.items())))
