"""Group-sequential boundaries and inverse-normal combination of stagewise p-values.

Stage scores ``z_r = Phi^{-1}(1 - p_r)`` are combined cumulatively as
``Z*_r = sum_{k<=r} w_k z_k / sqrt(tau_r)`` with ``tau_r = sum_{k<=r} w_k**2``
and ``sum_k w_k**2 = 1``.  The trial rejects at the first stage with
``Z*_r >= c_r``.  Pocock uses a constant ``c_r = c``; O'Brien-Fleming uses
``c_r = c / sqrt(tau_r)``.  The constant is found so that the null crossing
probability equals ``alpha``, by recursive numerical integration of the
density of the running weighted sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.stats import norm

from .errors import ConfigError, ConvergenceError
from .model import AccrualPlan

POCOCK = "pocock"
OBRIEN_FLEMING = "obrien-fleming"
CUSTOM = "custom"
FAMILIES = (POCOCK, OBRIEN_FLEMING, CUSTOM)
_ALIASES = {"p": POCOCK, "pocock": POCOCK, "of": OBRIEN_FLEMING, "obf": OBRIEN_FLEMING, "obrien-fleming": OBRIEN_FLEMING, "custom": CUSTOM}

Z_CLIP = 38.0
BOUNDARY_TOL = 1e-6


def family_name(name: str) -> str:
    try:
        return _ALIASES[str(name).lower().replace("_", "-").replace("'", "")]
    except KeyError:
        raise ConfigError(f"unknown boundary family {name!r}; expected one of {FAMILIES}") from None


def equal_weights(m: int) -> np.ndarray:
    return np.full(m, 1.0 / math.sqrt(m))


def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or not len(w) or np.any(w <= 0):
        raise ConfigError("combination weights must be positive")
    if abs(np.sum(w**2) - 1.0) > 1e-9:
        raise ConfigError(f"squared combination weights must sum to 1, got {np.sum(w**2):.12g}")
    return w


def crossing_probabilities(bounds, weights, n_points: int = 2001) -> np.ndarray:
    """Null probabilities of first crossing ``sum_{k<=r} w_k z_k >= bounds[r]`` at each stage.

    ``bounds`` are on the scale of the running weighted sum, i.e.
    ``c_r * sqrt(tau_r)``.  The continuation density is carried on a uniform
    grid and propagated by Simpson's rule.
    """
    bounds = np.asarray(bounds, dtype=float)
    w = np.asarray(weights, dtype=float)
    m = len(bounds)
    out = np.empty(m)
    out[0] = norm.sf(bounds[0] / w[0])
    if m == 1:
        return out
    sd = math.sqrt(np.sum(w**2))
    lo = -10.0 * sd
    x = np.linspace(lo, bounds[0], n_points)
    dens = norm.pdf(x / w[0]) / w[0]
    for r in range(1, m):
        h = x[1] - x[0]
        simpson = np.ones(len(x))
        simpson[1:-1:2] = 4.0
        simpson[2:-1:2] = 2.0
        simpson *= h / 3.0
        out[r] = np.sum(simpson * dens * norm.sf((bounds[r] - x) / w[r]))
        if r + 1 < m:
            x_new = np.linspace(lo, bounds[r], n_points)
            kernel = norm.pdf((x_new[:, None] - x[None, :]) / w[r]) / w[r]
            dens = kernel @ (simpson * dens)
            x = x_new
    return out


def _alpha_of(bounds, weights) -> float:
    """Total crossing probability with grid doubling until stable to 1e-10."""
    n = 1001
    prev = crossing_probabilities(bounds, weights, n).sum()
    while n < 64001:
        n = 2 * n - 1
        cur = crossing_probabilities(bounds, weights, n).sum()
        if abs(cur - prev) < 1e-10:
            return cur
        prev = cur
    raise ConvergenceError("boundary recursion did not converge under grid refinement")


@dataclass(frozen=True)
class Boundaries:
    """Critical values ``c_r`` for the cumulative statistic and their one-sided p-thresholds."""

    family: str
    alpha: float
    weights: np.ndarray
    z: np.ndarray

    @property
    def m(self) -> int:
        return len(self.z)

    @property
    def tau(self) -> np.ndarray:
        return np.cumsum(self.weights**2)

    @property
    def p(self) -> np.ndarray:
        return norm.sf(self.z)

    @property
    def sum_bounds(self) -> np.ndarray:
        """Critical values on the running weighted-sum scale."""
        return self.z * np.sqrt(self.tau)

    def to_dict(self) -> dict:
        return {"family": self.family, "alpha": self.alpha, "weights": self.weights.tolist(), "z": self.z.tolist(), "p": self.p.tolist()}


def sequential_boundaries(family: str, m: int, alpha: float, weights=None, levels=None) -> Boundaries:
    """Critical values with null overall crossing probability ``alpha``.

    ``family`` is Pocock, O'Brien-Fleming or custom; a custom family takes
    per-stage one-sided ``levels`` for the cumulative statistic, which must not
    spend more than ``alpha`` in total.
    """
    family = family_name(family)
    if int(m) != m or m < 1:
        raise ConfigError("number of stages must be a positive integer")
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    w = equal_weights(m) if weights is None else _check_weights(weights)
    if len(w) != m:
        raise ConfigError("need one combination weight per stage")
    tau = np.cumsum(w**2)
    if family == CUSTOM:
        if levels is None or len(levels) != m:
            raise ConfigError("custom boundaries need one level per stage")
        levels = np.asarray(levels, dtype=float)
        if np.any((levels <= 0) | (levels >= 1)):
            raise ConfigError("custom stage levels must lie in (0, 1)")
        z = norm.isf(levels)
        spent = _alpha_of(z * np.sqrt(tau), w)
        if spent > alpha + BOUNDARY_TOL:
            raise ConfigError(f"custom stage levels spend {spent:.6f} > alpha = {alpha}")
        return Boundaries(family, float(alpha), w, z)
    shape = np.ones(m) if family == POCOCK else 1.0 / np.sqrt(tau)
    if m == 1:
        return Boundaries(family, float(alpha), w, np.array([norm.isf(alpha)]))

    def excess(c):
        return _alpha_of(c * shape * np.sqrt(tau), w) - alpha

    c0 = norm.isf(alpha)
    c = brentq(excess, 0.5 * c0, c0 + 4.0, xtol=1e-10, rtol=1e-12)
    return Boundaries(family, float(alpha), w, c * shape)


@dataclass(frozen=True)
class CombinationResult:
    """Outcome after ``len(p_values)`` stages."""

    decision: str
    stage: int
    z_scores: np.ndarray
    combined: np.ndarray
    stage_levels: np.ndarray
    next_level: float | None

    @property
    def rejected(self) -> bool:
        return self.decision == "reject"


def stage_scores(p_values) -> np.ndarray:
    p = np.asarray(p_values, dtype=float)
    if np.any(~((p > 0) & (p <= 1))):
        raise ConfigError("stagewise p-values must lie in (0, 1]")
    return np.clip(norm.isf(p), -Z_CLIP, Z_CLIP)


def conditional_level(boundaries: Boundaries, z_history) -> float:
    """One-sided level for stage ``r+1`` given the first ``r`` stage scores.

    The next stage rejects iff its own p-value is at most this level.
    """
    z_history = np.asarray(z_history, dtype=float)
    r = len(z_history)
    if r >= boundaries.m:
        raise ConfigError("no further stage in this design")
    w = boundaries.weights
    need = (boundaries.sum_bounds[r] - np.dot(w[:r], z_history)) / w[r]
    return float(norm.sf(need))


def combine_stages(p_values: Sequence[float], boundaries: Boundaries) -> CombinationResult:
    """Apply the sequential test to the observed stagewise p-values.

    Stops at the first crossing; otherwise reports the conditional level
    available to the next stage (``None`` after the final stage).
    """
    p_values = list(p_values)
    if not p_values:
        raise ConfigError("at least one stagewise p-value is required")
    if len(p_values) > boundaries.m:
        raise ConfigError(f"design has {boundaries.m} stages, got {len(p_values)} p-values")
    z = stage_scores(p_values)
    w = boundaries.weights
    combined = np.cumsum(w[: len(z)] * z) / np.sqrt(boundaries.tau[: len(z)])
    levels = np.array([conditional_level(boundaries, z[:r]) for r in range(len(z))])
    for r in range(len(z)):
        # the stage level decides, so the p-value and the combined scale always agree
        if p_values[r] <= levels[r]:
            return CombinationResult("reject", r + 1, z[: r + 1], combined[: r + 1], levels[: r + 1], None)
    nxt = conditional_level(boundaries, z) if len(z) < boundaries.m else None
    return CombinationResult("continue" if nxt is not None else "accept", len(z), z, combined, levels, nxt)


def conditional_error_mass(boundaries: Boundaries) -> float:
    """``alpha_1 + int_{alpha_1}^1 alpha_2(p) dp`` for a two-stage design."""
    if boundaries.m != 2:
        raise ConfigError("conditional error mass is defined for two-stage designs")
    a1 = float(boundaries.p[0])
    integral, _ = quad(lambda p: conditional_level(boundaries, [norm.isf(p)]), a1, 1.0, epsabs=1e-12, epsrel=1e-10, limit=200)
    return a1 + integral


@dataclass(frozen=True)
class DesignSpec:
    """Analysis calendar, boundary family, level and accrual plan of a trial."""

    times: tuple[float, ...]
    alpha: float = 0.05
    family: str = POCOCK
    weights: tuple[float, ...] | None = None
    levels: tuple[float, ...] | None = None
    plan: AccrualPlan | None = None
    a_add_bounds: tuple[float, float] | None = None
    target_power: float = 0.8

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if not times or times[0] <= 0 or any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("analysis times must satisfy 0 < t_1 < ... < t_m")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "family", family_name(self.family))
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.weights is not None:
            w = _check_weights(self.weights)
            if len(w) != len(times):
                raise ConfigError("need one combination weight per stage")
            object.__setattr__(self, "weights", tuple(w.tolist()))
        if self.a_add_bounds is not None:
            lo, hi = self.a_add_bounds
            if not 0 <= lo <= hi:
                raise ConfigError("need 0 <= a_min <= a_max")
        if not 0 < self.target_power < 1:
            raise ConfigError("target power must lie in (0, 1)")

    @property
    def m(self) -> int:
        return len(self.times)

    def boundaries(self) -> Boundaries:
        return _cached_boundaries(self.family, self.m, self.alpha, self.weights, self.levels)


_BOUNDARY_CACHE: dict = {}


def _cached_boundaries(family, m, alpha, weights, levels) -> Boundaries:
    key = (family, m, alpha, weights, None if levels is None else tuple(levels))
    hit = _BOUNDARY_CACHE.get(key)
    if hit is None:
        hit = _BOUNDARY_CACHE[key] = sequential_boundaries(family, m, alpha, weights, levels)
    return hit
