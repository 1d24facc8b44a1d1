"""Planning under a fixed proportional-hazards alternative.

Per patient, the statistic ``U(t)`` has drift ``sqrt(n) * theta(t)`` and
covariance ``Sigma(t)``, while ``V_hat(t)`` converges to ``V(t)``.  With
expected at-risk masses

    y_g^{j->E}(t, u) = rho_g P_g(X(u) = j, E not yet entered) P(Ctilde >= u) clamp((t - u) / a, 0, 1)

and ``mu = y_1 / (y_0 + y_1)``, the integrands are

    theta^E:        sum q   [y_1 lam_1 (1 - mu) - y_0 lam_0 mu]
    Sigma^{bc}:     sum q^2 [y_1 lam_1 (1 - mu_b)(1 - mu_c) + y_0 lam_0 mu_b mu_c]
    V^{bc}:         sum q^2 [y_1 (1 - mu_b)(1 - mu_c) + y_0 mu_b mu_c] (y_0 lam_0 + y_1 lam_1) / (y_0 + y_1)

where covariance sums run over transitions leaving the union of both events
into their intersection, with ``y`` restricted to that union.  Only the
factor ``clamp((t - u) / a)`` depends on ``t`` and ``a``, so each integrand is
integrated once against ``1`` and ``u`` and every ``(t, a)`` is read off the
two running integrals.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import chi2, ncx2, norm

from .cohort import ALL_ENTRIES, Cohort, EventDefinition
from .design import Z_CLIP, Boundaries, DesignSpec, conditional_level
from .errors import ConfigError, SingularCovarianceError, UnreachablePowerError
from .invertibility import SINGULAR, invertibility_report
from .model import AccrualPlan, MultiStateModel, TransitionIntensity
from .numerics import CumulativeIntegral, VGrid, occupation_on_grid, refined, time_power
from .sampling import make_rng
from .stats import UNIT_WEIGHT, WeightFunction

POWER_DRAWS = 10**6
POWER_SEED = 20240917
MAX_SAMPLE_SIZE = 10**6
PSI_DRAWS = 20000


@dataclass(frozen=True)
class PlanningAssumptions:
    """Control intensities with hazard ratios, accrual plan and dropout law.

    Dropout is exponential with ``dropout_rate`` (0 means no dropout).
    """

    model: MultiStateModel
    plan: AccrualPlan
    dropout_rate: float = 0.0
    weight: WeightFunction = UNIT_WEIGHT

    def __post_init__(self):
        if not self.dropout_rate >= 0:
            raise ConfigError("dropout rate must be nonnegative")

    @property
    def allocation(self) -> float:
        return self.plan.allocation


def _ratio(num, den):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


class _CurveSet:
    """Running integrals of all integrands on one grid."""

    def __init__(self, assumptions, events, horizon, n_panels):
        # intensities with shape < 1 are infinite at u = 0, where the masses
        # vanish; the resulting nan is discarded by the substituted quadrature
        with np.errstate(invalid="ignore", divide="ignore"):
            self._build(assumptions, events, horizon, n_panels)

    def _build(self, assumptions: PlanningAssumptions, events: Sequence[EventDefinition], horizon: float, n_panels: int):
        model = assumptions.model
        d = len(events)
        grid = VGrid(horizon, time_power([model]), n_panels)
        u = grid.u
        rho = (1.0 - assumptions.allocation, assumptions.allocation)
        surv = np.exp(-assumptions.dropout_rate * u)
        all_entries = events[0].mode == ALL_ENTRIES
        occ_cache: dict = {}

        def masses(taboo):
            key = frozenset() if all_entries else frozenset(taboo)
            hit = occ_cache.get(key)
            if hit is None:
                hit = occ_cache[key] = tuple(
                    rho[g] * occupation_on_grid(model, g, grid, key) * surv[:, None] for g in (0, 1)
                )
            return hit

        lam = {tr.key: (tr.hazard(u, 0), tr.hazard(u, 1)) for tr in model.intensities}
        weight = assumptions.weight

        rows = []
        for b, e in enumerate(events):
            y0, y1 = masses(e.states)
            h = np.zeros_like(u)
            for (j, k), (l0, l1) in lam.items():
                if not e.contributes(j, k):
                    continue
                mu = _ratio(y1[:, j], y0[:, j] + y1[:, j])
                q = weight(j, k, horizon, u)
                h = h + q * (y1[:, j] * l1 * (1.0 - mu) - y0[:, j] * l0 * mu)
            rows.append(h)
        self.pairs = [(b, c) for b in range(d) for c in range(b, d)]
        for kind in ("sigma", "limit"):
            for b, c in self.pairs:
                eb, ec = events[b], events[c]
                union = eb.states | ec.states
                both = eb.states & ec.states
                yu0, yu1 = masses(union)
                yb0, yb1 = masses(eb.states)
                yc0, yc1 = masses(ec.states)
                h = np.zeros_like(u)
                for (j, k), (l0, l1) in lam.items():
                    if j in union or k not in both:
                        continue
                    mub = _ratio(yb1[:, j], yb0[:, j] + yb1[:, j])
                    muc = _ratio(yc1[:, j], yc0[:, j] + yc1[:, j])
                    q2 = weight(j, k, horizon, u) ** 2
                    a0, a1 = yu0[:, j], yu1[:, j]
                    if kind == "sigma":
                        h = h + q2 * (a1 * l1 * (1 - mub) * (1 - muc) + a0 * l0 * mub * muc)
                    else:
                        share = _ratio(a1 * (1 - mub) * (1 - muc) + a0 * mub * muc, a0 + a1)
                        h = h + q2 * share * (a0 * l0 + a1 * l1)
                rows.append(h)
        values = np.array(rows)
        self.d = d
        self.grid = grid
        self.h0 = CumulativeIntegral(grid, values)
        self.h1 = CumulativeIntegral(grid, values * u)
        self.total = np.concatenate([self.h0.total, self.h1.total])
        self._occ = occ_cache

    def integrate(self, t: float, a: float) -> np.ndarray:
        """``int_0^t h(u) clamp((t - u) / a, 0, 1) du`` for every integrand."""
        if t <= 0:
            return np.zeros(len(self.h0.total))
        if t <= a:
            return (t * self.h0(t) - self.h1(t)) / a
        lo = t - a
        return self.h0(lo) + (t * (self.h0(t) - self.h0(lo)) - (self.h1(t) - self.h1(lo))) / a

    def unpack(self, values):
        d = self.d
        theta = values[:d]
        sig = np.zeros((d, d))
        lim = np.zeros((d, d))
        npairs = len(self.pairs)
        for i, (b, c) in enumerate(self.pairs):
            sig[b, c] = sig[c, b] = values[d + i]
            lim[b, c] = lim[c, b] = values[d + npairs + i]
        return theta, sig, lim


class PlanningCurves:
    """Per-patient drift and covariance functions ``theta(t; a)``, ``Sigma(t; a)``, ``V(t; a)``.

    ``a`` is the accrual duration (uniform recruitment on ``[0, a]``); values
    are valid for analysis times up to ``horizon``.
    """

    def __init__(self, assumptions: PlanningAssumptions, events: Sequence[EventDefinition], horizon: float):
        if not events:
            raise ConfigError("at least one event is required")
        if len({e.mode for e in events}) > 1:
            raise ConfigError("all events of one analysis must use the same mode")
        if not horizon > 0:
            raise ConfigError("planning horizon must be positive")
        self.assumptions = assumptions
        self.events = list(events)
        self.horizon = float(horizon)
        self._curves = refined(lambda n: _CurveSet(assumptions, self.events, self.horizon, n))

    def at(self, t: float, a: float | None = None):
        """``(theta, Sigma, V)`` at calendar ``t`` for accrual duration ``a``."""
        a = self.assumptions.plan.duration if a is None else float(a)
        if t > self.horizon * (1 + 1e-12):
            raise ConfigError(f"analysis time {t} beyond planning horizon {self.horizon}")
        return self._curves.unpack(self._curves.integrate(min(t, self.horizon), a))

    def increments(self, times: Sequence[float], a: float | None = None):
        """Stagewise ``(dtheta, dSigma, dV)`` between consecutive analysis times (``t_0 = 0``)."""
        prev = (np.zeros(len(self.events)), np.zeros((len(self.events),) * 2), np.zeros((len(self.events),) * 2))
        out = []
        for t in times:
            cur = self.at(t, a)
            out.append(tuple(c - p for c, p in zip(cur, prev)))
            prev = cur
        return out

    def share_treated(self, event_index: int, state: int) -> np.ndarray:
        """``mu^{state->E}(u)`` on the quadrature grid."""
        e = self.events[event_index]
        key = frozenset() if e.mode == ALL_ENTRIES else e.states
        y0, y1 = self._curves._occ[key]
        return _ratio(y1[:, state], y0[:, state] + y1[:, state])

    @property
    def grid_u(self) -> np.ndarray:
        return self._curves.grid.u


@dataclass(frozen=True)
class PlanningMoments:
    """Stagewise per-patient drift ``dtheta``, covariances ``dsigma`` (sampling) and ``dv`` (estimator limit)."""

    times: tuple[float, ...]
    dtheta: np.ndarray
    dsigma: np.ndarray
    dv: np.ndarray
    eta: np.ndarray

    @property
    def d(self) -> int:
        return self.dtheta.shape[1]

    def to_dict(self) -> dict:
        return {
            "times": list(self.times),
            "dtheta": self.dtheta.tolist(),
            "dsigma": self.dsigma.tolist(),
            "dV": self.dv.tolist(),
            "eta": self.eta.tolist(),
        }


def _noncentrality(dtheta, dv, stage) -> float:
    try:
        L = np.linalg.cholesky(dv)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(
            f"planning covariance increment of stage {stage} is singular; see invertibility_report for the events"
        ) from None
    x = np.linalg.solve(L, dtheta)
    return float(x @ x)


def moments_from_curves(curves: PlanningCurves, times: Sequence[float], a: float | None = None) -> PlanningMoments:
    incs = curves.increments(times, a)
    dtheta = np.array([i[0] for i in incs])
    dsigma = np.array([i[1] for i in incs])
    dv = np.array([i[2] for i in incs])
    eta = np.array([_noncentrality(dtheta[r], dv[r], r + 1) for r in range(len(times))])
    return PlanningMoments(tuple(float(t) for t in times), dtheta, dsigma, dv, eta)


def planning_moments(assumptions: PlanningAssumptions, events: Sequence[EventDefinition], design: DesignSpec) -> PlanningMoments:
    """Stagewise moments at the design's analysis times under ``assumptions``."""
    report = invertibility_report(assumptions.model, events)
    if report.verdict == SINGULAR:
        raise SingularCovarianceError("event configuration is provably singular: " + "; ".join(report.reasons))
    curves = PlanningCurves(assumptions, events, design.times[-1])
    return moments_from_curves(curves, design.times)


class PowerEngine:
    """Monte Carlo power of the sequential chi-square test with common random numbers.

    Stage increments are drawn as ``sqrt(n) dtheta_r + dSigma_r^{1/2} eps`` and
    standardized with ``dV_r``; the quadratic form splits into terms that do
    not depend on ``n``, so each power evaluation reuses the same draws.
    """

    def __init__(self, moments: PlanningMoments, boundaries: Boundaries, draws: int = POWER_DRAWS, seed: int = POWER_SEED):
        if boundaries.m != len(moments.times):
            raise ConfigError("design and planning moments disagree on the number of stages")
        self.moments = moments
        self.boundaries = boundaries
        rng = make_rng(seed, 0)
        self.linear = []
        self.quadratic = []
        for r in range(boundaries.m):
            eps = rng.standard_normal((draws, moments.d))
            root = _psd_root(moments.dsigma[r])
            inv = np.linalg.inv(moments.dv[r])
            noise = eps @ root.T
            self.linear.append(noise @ (inv @ moments.dtheta[r]))
            self.quadratic.append(np.einsum("ij,jk,ik->i", noise, inv, noise))

    def power(self, n: float) -> float:
        sqn = math.sqrt(n)
        d = self.moments.d
        w = self.boundaries.weights
        bounds = self.boundaries.sum_bounds
        running = None
        rejected = None
        for r in range(self.boundaries.m):
            s = n * self.moments.eta[r] + 2.0 * sqn * self.linear[r] + self.quadratic[r]
            z = np.clip(norm.isf(chi2.sf(np.maximum(s, 0.0), d)), -Z_CLIP, Z_CLIP)
            running = w[r] * z if running is None else running + w[r] * z
            hit = running >= bounds[r]
            rejected = hit if rejected is None else rejected | hit
        return float(np.mean(rejected))


def _psd_root(matrix) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (matrix + matrix.T))
    return v * np.sqrt(np.clip(w, 0.0, None))


def design_power(moments: PlanningMoments, design: DesignSpec, n: float, draws: int = POWER_DRAWS, seed: int = POWER_SEED) -> float:
    """Overall rejection probability of the sequential design with ``n`` patients."""
    if not n > 0:
        raise ConfigError("sample size must be positive")
    return PowerEngine(moments, design.boundaries(), draws, seed).power(n)


def required_sample_size(
    moments: PlanningMoments,
    design: DesignSpec,
    target: float | None = None,
    draws: int = POWER_DRAWS,
    seed: int = POWER_SEED,
    max_n: int = MAX_SAMPLE_SIZE,
) -> int:
    """Smallest integer ``n`` whose Monte Carlo power reaches ``target``."""
    target = design.target_power if target is None else target
    if not 0 < target < 1:
        raise ConfigError("target power must lie in (0, 1)")
    if np.all(moments.eta == 0) or np.allclose(moments.dtheta, 0.0, atol=1e-15):
        raise UnreachablePowerError("target power unreachable: the alternative has no drift (all hazard ratios are 1)")
    engine = PowerEngine(moments, design.boundaries(), draws, seed)
    if engine.power(1) >= target:
        return 1
    lo, hi = 1, 2
    while engine.power(hi) < target:
        lo, hi = hi, 2 * hi
        if lo > max_n:
            raise UnreachablePowerError(f"target power {target} unreachable with n <= {max_n}")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if engine.power(mid) >= target:
            hi = mid
        else:
            lo = mid
    if hi > max_n:
        raise UnreachablePowerError(f"target power {target} unreachable with n <= {max_n}")
    return hi


# --- interim estimation and accrual recalculation ---------------------------


def estimate_intensities(cohort: Cohort, t: float, transitions: Sequence[tuple[int, int]] | None = None) -> dict:
    """Occurrence/exposure rates ``{group: {(j, k): rate or None}}`` from data visible at ``t``.

    ``None`` marks a transition whose source state has no exposure.
    """
    view = cohort.view(t)
    if transitions is None:
        transitions = sorted(set(zip(view.tr_source.tolist(), view.tr_target.tolist())))
    out = {}
    for g in (0, 1):
        in_group = cohort.group == g
        rates = {}
        for j, k in transitions:
            sel = (view.soj_state == j) & in_group[view.soj_patient]
            exposure = float(np.sum(view.soj_end[sel] - view.soj_start[sel]))
            events = int(np.sum((view.tr_source == j) & (view.tr_target == k) & in_group[view.tr_patient]))
            rates[(int(j), int(k))] = events / exposure if exposure > 0 else None
        out[g] = rates
    return out


def model_from_rates(rates: Mapping[int, Mapping[tuple[int, int], float]], n_states: int) -> MultiStateModel:
    """Homogeneous model with group-0 rates and group-1/group-0 ratios as hazard ratios."""
    trs = []
    for key in sorted(rates[0]):
        r0, r1 = rates[0][key], rates[1][key]
        trs.append(TransitionIntensity(key[0], key[1], r0, 1.0, r1 / r0))
    return MultiStateModel(n_states, tuple(trs))


@dataclass(frozen=True)
class RecalcDecision:
    a_add: float
    branch: str
    final_time: float
    accrual_duration: float
    sample_size: int
    conditional_level: float
    rates: dict
    fallbacks: tuple
    psi_curve: tuple
    psi_min: float
    psi_max: float

    def to_dict(self) -> dict:
        return {
            "a_add": self.a_add,
            "branch": self.branch,
            "final_time": self.final_time,
            "accrual_duration": self.accrual_duration,
            "sample_size": self.sample_size,
            "conditional_level": self.conditional_level,
            "rates": {str(g): {f"{j}->{k}": r for (j, k), r in rs.items()} for g, rs in self.rates.items()},
            "fallbacks": [f"{g}:{j}->{k}" for g, (j, k) in self.fallbacks],
            "psi_min": self.psi_min,
            "psi_max": self.psi_max,
            "psi_curve": [list(p) for p in self.psi_curve],
        }


class ConditionalPower:
    """Conditional power ``psi(a_add)`` of the final stage for an accrual extension.

    Accrual ends at ``t1 + a_add`` with recruitment continuing at the planned
    rate and the final analysis follows after ``follow_up``.  The final stage
    rejects iff its p-value is at most the conditional level.  With
    ``method="normal"`` (default) the stage increment is drawn from
    ``N(sqrt(n) dtheta, dSigma)`` and standardized by ``dV`` using fixed
    seeded draws, as for design power; ``method="ncx2"`` uses the
    noncentral chi-square limit with ``n * eta``.
    """

    METHODS = ("normal", "ncx2")

    def __init__(
        self,
        model: MultiStateModel,
        events,
        t1: float,
        follow_up: float,
        rate: float,
        level: float,
        a_max: float,
        allocation: float = 0.5,
        dropout_rate: float = 0.0,
        method: str = "normal",
        draws: int = PSI_DRAWS,
        seed: int = POWER_SEED,
    ):
        if method not in self.METHODS:
            raise ConfigError(f"conditional power method must be one of {self.METHODS}")
        plan = AccrualPlan(t1 + a_max, follow_up, rate, allocation)
        self.curves = PlanningCurves(PlanningAssumptions(model, plan, dropout_rate), events, t1 + a_max + follow_up)
        self.t1 = t1
        self.follow_up = follow_up
        self.rate = rate
        self.level = level
        self.method = method
        self.d = len(events)
        self.critical = chi2.isf(level, self.d) if level > 0 else math.inf
        self._eps = make_rng(seed, 1).standard_normal((draws, self.d)) if method == "normal" else None

    def __call__(self, a_add: float) -> float:
        if self.level <= 0:
            return 0.0
        accrual = self.t1 + a_add
        final = accrual + self.follow_up
        th1, s1, v1 = self.curves.at(self.t1, accrual)
        th2, s2, v2 = self.curves.at(final, accrual)
        dtheta, dsigma, dv = th2 - th1, s2 - s1, v2 - v1
        n = self.rate * accrual
        if self.method == "ncx2":
            eta = _noncentrality(dtheta, dv, 2)
            return float(ncx2.sf(self.critical, self.d, n * eta))
        _noncentrality(dtheta, dv, 2)
        x = math.sqrt(n) * dtheta + self._eps @ _psd_root(dsigma).T
        s = np.einsum("ij,ij->i", x, np.linalg.solve(dv, x.T).T)
        return float(np.mean(s > self.critical))


def apply_recalc_rule(psi, a_min: float, a_max: float, target: float = 0.8, floor: float = 0.5, tol: float = 0.01):
    """The four-branch accrual rule; returns ``(a_add, branch, samples)``."""
    samples = []

    def f(a):
        v = psi(a)
        samples.append((float(a), float(v)))
        return v

    p_min = f(a_min)
    if p_min >= target:
        return a_min, "a_min: psi(a_min) >= target", samples
    p_max = f(a_max)
    if p_max >= target:
        lo, hi = a_min, a_max
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if f(mid) >= target:
                hi = mid
            else:
                lo = mid
        return hi, "inverse: psi(a_add) = target", samples
    if p_max >= floor:
        return a_max, "a_max: floor <= psi(a_max) < target", samples
    return a_min, "a_min: psi(a_max) < floor", samples


def accrual_recalc(
    cohort: Cohort,
    design: DesignSpec,
    a_min: float,
    a_max: float,
    z1: float,
    events: Sequence[EventDefinition],
    fallback: MultiStateModel | None = None,
    n_states: int | None = None,
    dropout_rate: float = 0.0,
    psi_method: str = "normal",
) -> RecalcDecision:
    """Interim accrual extension after stage 1 at ``design.times[0]``.

    ``z1`` is the realized stage-1 score; per-group occurrence/exposure rates
    define the alternative for the conditional power.  Missing rates fall
    back to ``fallback`` (the planning model) with a warning.
    """
    if not 0 <= a_min <= a_max:
        raise ConfigError("need 0 <= a_min <= a_max")
    plan = design.plan
    if plan is None or plan.rate is None:
        raise ConfigError("accrual recalculation needs an accrual plan with a rate")
    if design.m != 2:
        raise ConfigError("accrual recalculation is defined for two-stage designs")
    t1 = design.times[0]
    if cohort.n == 0 or not np.any(cohort.entry < t1):
        raise ConfigError("interim cohort has no recruited patients")
    transitions = fallback.transitions if fallback is not None else None
    rates = estimate_intensities(cohort, t1, transitions)
    fallbacks = []
    for g in (0, 1):
        for key, r in list(rates[g].items()):
            if r is None or r == 0:
                if fallback is None:
                    raise ConfigError(f"no estimable rate for transition {key[0]}->{key[1]} in group {g} and no planning fallback")
                rates[g][key] = float(fallback.intensity(*key).hazard(1.0, g))
                fallbacks.append((g, key))
    if fallbacks:
        warnings.warn(f"planning rates used for unestimable transitions {fallbacks}", stacklevel=2)
    if n_states is None:
        n_states = (fallback.n_states if fallback is not None else max(k for key in rates[0] for k in key) + 1)
    model = model_from_rates(rates, n_states)
    boundaries = design.boundaries()
    level = conditional_level(boundaries, [z1])
    psi = ConditionalPower(model, events, t1, plan.follow_up, plan.rate, level, a_max, plan.allocation, dropout_rate, psi_method)
    a_add, branch, samples = apply_recalc_rule(psi, a_min, a_max, design.target_power)
    accrual = t1 + a_add
    return RecalcDecision(
        float(a_add),
        branch,
        accrual + plan.follow_up,
        accrual,
        int(round(plan.rate * accrual)),
        level,
        rates,
        tuple(fallbacks),
        tuple(sorted(samples)),
        samples[0][1],
        psi(a_max),
    )
