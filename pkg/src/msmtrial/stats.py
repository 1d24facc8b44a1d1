"""Multivariate log-rank-type statistics for composite multi-state events.

For events ``E_1..E_d`` the statistic ``U^E(t)`` sums, over observed entries
into ``E`` from a state ``j`` outside ``E``, the centred group label
``Z_i - Y^{j->E,Z=1}(s) / Y^{j->E}(s)`` (optionally weighted), scaled by
``n**-0.5``.  In first-hitting mode only the first entry counts and risk sets
exclude patients who already had the event; in all-entries mode every entry
counts and risk sets are the plain state occupation counts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import chi2

from .cohort import FIRST_HITTING, Cohort, CohortView, EventDefinition, IntervalCounter
from .errors import ConfigError, SingularCovarianceError

PINV_RTOL = 1e-10


class RankDeficientWarning(UserWarning):
    """A stage covariance increment is singular; the pseudo-inverse was used."""


@dataclass(frozen=True)
class WeightFunction:
    """Per-transition weights ``Q^{jk}(t, s)``; unlisted transitions weigh 1.

    Values are constants or vectorized callables ``f(t, s_array)``.
    """

    weights: Mapping[tuple[int, int], float | Callable] = field(default_factory=dict)

    def __call__(self, j: int, k: int, t: float, s) -> np.ndarray:
        w = self.weights.get((j, k), 1.0)
        s = np.asarray(s, dtype=float)
        if callable(w):
            return np.broadcast_to(np.asarray(w(t, s), dtype=float), s.shape)
        return np.full(s.shape, float(w))

    @property
    def is_unit(self) -> bool:
        return all(not callable(w) and w == 1.0 for w in self.weights.values())


UNIT_WEIGHT = WeightFunction()


def _mode(events: Sequence[EventDefinition]) -> str:
    if not events:
        raise ConfigError("at least one event is required")
    modes = {e.mode for e in events}
    if len(modes) > 1:
        raise ConfigError("all events of one analysis must use the same mode")
    return modes.pop()


class _Analysis:
    """Counting-process sums of one cohort at one calendar time."""

    def __init__(self, cohort: Cohort, events: Sequence[EventDefinition], t: float, weight: WeightFunction):
        self.mode = _mode(events)
        self.events = list(events)
        self.view: CohortView = cohort.view(t)
        self.t = float(t)
        self.weight = weight
        self.treated = cohort.group == 1
        self._counters: dict = {}

    def counters(self, j: int, avoid: frozenset | None):
        key = (j, avoid)
        hit = self._counters.get(key)
        if hit is None:
            p, a, b = self.view.risk_intervals(j, avoid)
            g = self.treated[p]
            hit = self._counters[key] = (IntervalCounter(a, b), IntervalCounter(a[g], b[g]))
        return hit

    def share(self, source, time, avoid):
        """``Y^{j,Z=1}/Y^j`` (or the event-restricted version) at each event."""
        out = np.zeros(len(time))
        for j in np.unique(source):
            sel = source == j
            total, treated = self.counters(int(j), avoid)
            y = total(time[sel])
            y1 = treated(time[sel])
            # the event patient is in its own risk set, so y >= 1
            out[sel] = y1 / np.maximum(y, 1)
        return out

    def entries(self, states: frozenset, first_only: bool):
        v = self.view
        if first_only:
            mask = v.first_entry_mask(states)
        else:
            mask = np.isin(v.tr_target, list(states)) & ~np.isin(v.tr_source, list(states))
        return v.tr_time[mask], v.tr_source[mask], v.tr_target[mask], self.treated[v.tr_patient[mask]].astype(float)

    def weights(self, source, target, time):
        if self.weight.is_unit:
            return np.ones(len(time))
        out = np.empty(len(time))
        for j, k in set(zip(source.tolist(), target.tolist())):
            sel = (source == j) & (target == k)
            out[sel] = self.weight(j, k, self.t, time[sel])
        return out

    def u_and_v(self) -> tuple[np.ndarray, np.ndarray]:
        d = len(self.events)
        u = np.zeros(d)
        v = np.zeros((d, d))
        first = self.mode == FIRST_HITTING
        for b, eb in enumerate(self.events):
            avoid = eb.states if first else None
            time, source, target, z = self.entries(eb.states, first)
            share = self.share(source, time, avoid)
            q = self.weights(source, target, time)
            u[b] = np.sum(q * (z - share))
            v[b, b] = np.sum(q**2 * share * (1.0 - share))
            for c in range(b + 1, d):
                ec = self.events[c]
                v[b, c] = v[c, b] = self._cross(eb, ec, first)
        n = max(self.view.cohort.n, 1)
        return u / np.sqrt(n), v / n

    def _cross(self, eb: EventDefinition, ec: EventDefinition, first: bool) -> float:
        """Covariance entry from entries ``j -> k`` with ``j`` outside both events and ``k`` in both."""
        union = eb.states | ec.states
        both = eb.states & ec.states
        if not both:
            return 0.0
        time, source, target, _ = self.entries(union, first)
        keep = np.isin(target, list(both))
        time, source, target = time[keep], source[keep], target[keep]
        if not len(time):
            return 0.0
        q = self.weights(source, target, time)
        if not first:
            share = self.share(source, time, None)
            return float(np.sum(q**2 * share * (1.0 - share)))
        mu_b = self.share(source, time, eb.states)
        mu_c = self.share(source, time, ec.states)
        total = np.zeros(len(time))
        treated = np.zeros(len(time))
        for j in np.unique(source):
            sel = source == j
            cnt, cnt1 = self.counters(int(j), union)
            total[sel] = cnt(time[sel])
            treated[sel] = cnt1(time[sel])
        control = total - treated
        term = (treated * (1.0 - mu_b) * (1.0 - mu_c) + control * mu_b * mu_c) / np.maximum(total, 1)
        return float(np.sum(q**2 * term))


def statistics(cohort: Cohort, events: Sequence[EventDefinition], t: float, weight: WeightFunction = UNIT_WEIGHT):
    """``(U(t), V_hat(t))`` in one pass over the data."""
    if cohort.n == 0:
        raise ConfigError("cohort is empty")
    if t < 0:
        raise ConfigError("calendar time must be nonnegative")
    return _Analysis(cohort, events, t, weight).u_and_v()


def u_vector(cohort: Cohort, events: Sequence[EventDefinition], t: float, weight: WeightFunction = UNIT_WEIGHT) -> np.ndarray:
    """``U(t) = (U^{E_1}(t), ..., U^{E_d}(t))``."""
    return statistics(cohort, events, t, weight)[0]


def covariance_hat(cohort: Cohort, events: Sequence[EventDefinition], t: float, weight: WeightFunction = UNIT_WEIGHT) -> np.ndarray:
    """Consistent estimate ``V_hat(t)`` of the covariance of ``U(t)``."""
    return statistics(cohort, events, t, weight)[1]


def stage_increment(cohort, events, t_prev: float, t_now: float, weight: WeightFunction = UNIT_WEIGHT):
    """``(U(t_now) - U(t_prev), V_hat(t_now) - V_hat(t_prev))``; ``t_prev = 0`` gives the full statistic."""
    if not 0 <= t_prev < t_now:
        raise ConfigError(f"need 0 <= t_prev < t_now, got {t_prev}, {t_now}")
    u1, v1 = statistics(cohort, events, t_now, weight)
    if t_prev == 0:
        return u1, v1
    u0, v0 = statistics(cohort, events, t_prev, weight)
    return u1 - u0, v1 - v0


def standardize_cholesky(du, dv) -> np.ndarray:
    """``L^{-1} dU`` for the lower Cholesky factor ``L`` of ``dV``."""
    du = np.asarray(du, dtype=float)
    dv = np.asarray(dv, dtype=float)
    try:
        L = np.linalg.cholesky(dv)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(
            "covariance increment is not positive definite; use stage_statistic (pseudo-inverse) "
            "and check invertibility_report for the event configuration"
        ) from None
    return solve_triangular(L, du, lower=True)


def pseudo_inverse(matrix) -> tuple[np.ndarray, int]:
    """Spectral Moore-Penrose inverse of a symmetric matrix and its numerical rank."""
    m = np.asarray(matrix, dtype=float)
    m = 0.5 * (m + m.T)
    w, vecs = np.linalg.eigh(m)
    top = np.max(np.abs(w)) if w.size else 0.0
    keep = np.abs(w) > PINV_RTOL * top if top > 0 else np.zeros_like(w, dtype=bool)
    inv = (vecs[:, keep] / w[keep]) @ vecs[:, keep].T
    return inv, int(keep.sum())


@dataclass(frozen=True)
class StageResult:
    stage: int
    du: np.ndarray
    dv: np.ndarray
    z: np.ndarray | None
    statistic: float
    p_value: float
    rank: int

    @property
    def rank_deficient(self) -> bool:
        return self.rank < len(self.du)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "dU": self.du.tolist(),
            "dV": self.dv.tolist(),
            "Z": None if self.z is None else self.z.tolist(),
            "S": self.statistic,
            "p": self.p_value,
            "rank": self.rank,
            "rank_deficient": self.rank_deficient,
        }


def stage_statistic(du, dv, d: int | None = None, stage: int = 1) -> StageResult:
    """``S = dU' dV^+ dU`` with ``p = P(chi2_d > S)``.

    A singular ``dV`` is flagged through ``rank`` and a warning; the p-value
    keeps ``d`` degrees of freedom.
    """
    du = np.asarray(du, dtype=float)
    dv = np.asarray(dv, dtype=float)
    d = len(du) if d is None else d
    inv, rank = pseudo_inverse(dv)
    s = float(max(du @ inv @ du, 0.0))
    p = float(chi2.sf(s, d))
    z = None
    if rank < len(du):
        warnings.warn(f"stage {stage}: covariance increment has rank {rank} < {len(du)}", RankDeficientWarning, stacklevel=2)
    else:
        try:
            z = standardize_cholesky(du, dv)
        except SingularCovarianceError:
            z = None
    return StageResult(stage, du, dv, z, s, p, rank)
