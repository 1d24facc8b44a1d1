"""Shared numerical kernels: occupation probabilities and cumulative quadrature.

Weibull intensities ``rate * s**(shape - 1)`` are singular at ``s = 0`` when
``shape < 1`` and have unbounded derivatives there for non-integer shapes.
All grid-based computations therefore run on a substituted clock
``s = v**p``; with ``p = 2 / min(shape)`` every transformed intensity
``rate * p * v**(p*shape - 1)`` is bounded and at least once differentiable,
so fixed-step RK4 and Simpson's rule keep their accuracy near the origin.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicSpline
from scipy.linalg import expm

from .errors import ConvergenceError

RK4_MAX_STEP = 1e-3
RK4_TOL = 1e-8
QUAD_PANELS = 2000
QUAD_RTOL = 1e-7
MAX_PANELS = 2000 * 2**6


def time_power(models) -> float:
    """Exponent ``p`` of the clock substitution ``s = v**p`` for ``models``."""
    shapes = [tr.shape for m in models for tr in m.intensities]
    if all(float(g).is_integer() for g in shapes):
        return 1.0
    return max(1.0, 2.0 / min(shapes))


class VGrid:
    """Uniform grid on the substituted clock covering ``[0, horizon]``."""

    def __init__(self, horizon: float, p: float, n_panels: int = QUAD_PANELS):
        if n_panels % 2:
            n_panels += 1
        self.horizon = float(horizon)
        self.p = float(p)
        self.n_panels = n_panels
        self.v = np.linspace(0.0, self.horizon ** (1.0 / self.p), n_panels + 1)
        self.u = self.v**self.p
        self.u[-1] = self.horizon
        self.du_dv = self.p * self.v ** (self.p - 1.0)

    def to_v(self, u):
        return np.asarray(u, dtype=float) ** (1.0 / self.p)


class _TransformedRates:
    """Transition rates of one group on the substituted clock, as generators."""

    def __init__(self, model, group: int, p: float, taboo=frozenset()):
        trs = [tr for tr in model.intensities if tr.source not in taboo]
        S = model.n_states
        self.n_states = S
        self.coef = np.array([tr.scale(group) * p for tr in trs])
        self.expo = np.array([p * tr.shape - 1.0 for tr in trs])
        basis = np.zeros((len(trs), S, S))
        for i, tr in enumerate(trs):
            basis[i, tr.source, tr.target] += 1.0
            basis[i, tr.source, tr.source] -= 1.0
        self.basis = basis

    def generators(self, v) -> np.ndarray:
        """Generator matrices at each point of ``v``, shape ``(len(v), S, S)``."""
        v = np.asarray(v, dtype=float)
        if not len(self.coef):
            return np.zeros((len(v), self.n_states, self.n_states))
        with np.errstate(divide="ignore"):
            weights = self.coef * v[:, None] ** self.expo
        return np.einsum("nt,tij->nij", weights, self.basis)


def _rk4_nodes(rates: _TransformedRates, v_nodes, x0, substeps) -> np.ndarray:
    # The forward equation x' = x Q(v) is linear, so each RK4 step is a matrix
    # propagator; all propagators are built in one batch and then chained.
    starts = np.repeat(v_nodes[:-1], substeps)
    h = np.repeat(np.diff(v_nodes) / substeps, substeps)
    starts = starts + h * (np.arange(len(h)) - np.repeat(np.cumsum(substeps) - substeps, substeps))
    q0 = rates.generators(starts)
    qm = rates.generators(starts + 0.5 * h)
    q1 = rates.generators(starts + h)
    hh = h[:, None, None]
    eye = np.eye(rates.n_states)
    a2 = qm + 0.5 * hh * (q0 @ qm)
    a3 = qm + 0.5 * hh * (a2 @ qm)
    a4 = q1 + hh * (a3 @ q1)
    steps = eye + (hh / 6.0) * (q0 + 2.0 * a2 + 2.0 * a3 + a4)
    out = np.empty((len(v_nodes), len(x0)))
    out[0] = x = np.asarray(x0, dtype=float)
    ends = np.cumsum(substeps)
    k = 0
    for i, stop in enumerate(ends):
        while k < stop:
            x = x @ steps[k]
            k += 1
        out[i + 1] = x
    return out


def rk4_occupation(model, group, v_nodes, p, taboo=frozenset(), x0=None):
    """Forward-equation solution at ``v_nodes`` by RK4 with step halving.

    Steps never exceed ``RK4_MAX_STEP`` on the substituted clock; the step is
    halved until two successive solutions differ by less than ``RK4_TOL``.
    """
    rates = _TransformedRates(model, group, p, taboo)
    if x0 is None:
        x0 = np.zeros(model.n_states)
        x0[0] = 1.0
    v_nodes = np.asarray(v_nodes, dtype=float)
    gaps = np.diff(v_nodes)
    substeps = np.maximum(1, np.ceil(gaps / RK4_MAX_STEP - 1e-12)).astype(int)
    current = _rk4_nodes(rates, v_nodes, x0, substeps)
    for _ in range(12):
        finer = _rk4_nodes(rates, v_nodes, x0, 2 * substeps)
        if np.max(np.abs(finer - current)) < RK4_TOL:
            return finer
        current, substeps = finer, 2 * substeps
    raise ConvergenceError("RK4 occupation probabilities did not converge under step halving")


def homogeneous_occupation(model, group, u_nodes, taboo=frozenset(), x0=None):
    """Closed-form occupation probabilities ``x0 @ expm(Q u)`` at sorted ``u_nodes``."""
    Q = model.generator(1.0, group, taboo=taboo)
    if x0 is None:
        x0 = np.zeros(model.n_states)
        x0[0] = 1.0
    u_nodes = np.asarray(u_nodes, dtype=float)
    out = np.empty((len(u_nodes), model.n_states))
    x = np.asarray(x0, dtype=float) @ expm(Q * u_nodes[0]) if u_nodes[0] > 0 else np.asarray(x0, float)
    out[0] = x
    gaps = np.diff(u_nodes)
    step_cache: dict[float, np.ndarray] = {}
    for k, gap in enumerate(gaps):
        key = round(float(gap), 15)
        step = step_cache.get(key)
        if step is None:
            step = step_cache[key] = expm(Q * gap)
        x = x @ step
        out[k + 1] = x
    return out


def occupation_on_grid(model, group, grid: VGrid, taboo=frozenset()) -> np.ndarray:
    """``P(X(u) = j, E not yet visited)`` on ``grid.u`` for a start in state 0.

    ``taboo`` states are made absorbing; for ``j`` outside ``taboo`` the result
    is the probability of being in ``j`` without having entered ``taboo``.
    """
    taboo = frozenset(taboo)
    if grid.p == 1.0 and model.is_homogeneous:
        return homogeneous_occupation(model, group, grid.u, taboo)
    return rk4_occupation(model, group, grid.v, grid.p, taboo)


class CumulativeIntegral:
    """Running integrals ``int_0^x f(u) du`` of several curves on a :class:`VGrid`.

    ``values`` holds ``f(u)`` at ``grid.u`` with shape ``(..., N + 1)``;
    cumulative Simpson sums on the substituted clock are interpolated by a
    cubic spline so the integral can be read off at any ``x <= horizon``.
    """

    def __init__(self, grid: VGrid, values):
        self.grid = grid
        # at v = 0 the substituted integrand vanishes even where f(0) is infinite
        with np.errstate(invalid="ignore", divide="ignore"):
            integrand = np.where(grid.du_dv > 0, np.asarray(values, dtype=float) * grid.du_dv, 0.0)
        self.cumulative = cumulative_simpson(integrand, x=grid.v, axis=-1, initial=0.0)
        self._spline = CubicSpline(grid.v, self.cumulative, axis=-1)

    @property
    def total(self) -> np.ndarray:
        return self.cumulative[..., -1]

    def __call__(self, x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, self.grid.horizon)
        return self._spline(self.grid.to_v(x))


def refined(build, n_panels: int = QUAD_PANELS, rtol: float = QUAD_RTOL):
    """Call ``build(n_panels)`` with doubling panels until totals agree to ``rtol``.

    ``build`` returns an object with a ``total`` array; the finer of the two
    agreeing results is returned.
    """
    previous = build(n_panels)
    while n_panels < MAX_PANELS:
        n_panels *= 2
        current = build(n_panels)
        a, b = np.atleast_1d(previous.total), np.atleast_1d(current.total)
        scale = np.maximum(np.abs(b), 1e-300)
        diff = np.abs(a - b)
        if np.all((diff <= rtol * scale) | (diff < 1e-14)):
            return current
        previous = current
    raise ConvergenceError(
        f"Simpson quadrature did not reach relative tolerance {rtol} with {n_panels} panels"
    )
