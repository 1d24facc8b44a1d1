"""Stochastic path sampling for multi-state models.

Sojourn times are drawn by inverting the total cumulative out-intensity of the
current state, ``E = sum_k Lambda^{jk}(s, s + w)`` with ``E ~ Exp(1)``.  When
all outgoing shapes agree the inversion has a closed form; otherwise it is
solved by vectorized bisection.  The destination is drawn with probability
proportional to the intensities at the jump time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConvergenceError
from .model import MultiStateModel

BISECTION_RTOL = 1e-12
_MAX_BISECTIONS = 200


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based stream for ``(seed, *key)``; distinct keys never overlap."""
    if seed is None:
        raise ConfigError("a seed is mandatory")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


@dataclass(frozen=True)
class PatientPath:
    """Jumps ``(s, new_state)`` of one patient; the path starts in state 0 at ``s = 0``."""

    jumps: tuple[tuple[float, int], ...] = ()

    def __post_init__(self):
        jumps = tuple((float(s), int(k)) for s, k in self.jumps)
        times = [s for s, _ in jumps]
        if any(s < 0 for s in times):
            raise ConfigError("jump times must be nonnegative")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("jump times must be strictly increasing")
        object.__setattr__(self, "jumps", jumps)

    @property
    def states(self) -> tuple[int, ...]:
        return (0,) + tuple(k for _, k in self.jumps)

    def state_at(self, s: float) -> int:
        """Right-continuous state ``X(s)``."""
        state = 0
        for time, k in self.jumps:
            if time > s:
                break
            state = k
        return state

    def check(self, model: MultiStateModel) -> None:
        """Raise :class:`ConfigError` unless every jump is a model transition."""
        states = self.states
        allowed = set(model.transitions)
        for a, b in zip(states, states[1:]):
            if (a, b) not in allowed:
                raise ConfigError(f"path jump {a}->{b} is not a model transition")


@dataclass(frozen=True)
class Transitions:
    """Flat table of sampled jumps, sorted by patient and then time."""

    patient: np.ndarray
    time: np.ndarray
    source: np.ndarray
    target: np.ndarray

    def __len__(self):
        return len(self.time)


def _excess(coef, shapes, x, base, energy):
    return (coef * x[:, None] ** shapes / shapes).sum(axis=1) - base - energy


def _invert_cumulative(coef, shapes, s0, energy, upper):
    """Solve ``sum_k coef_k (x**g_k - s0**g_k) / g_k = energy`` for ``x`` in ``[s0, upper]``."""
    base = (coef * s0[:, None] ** shapes / shapes).sum(axis=1)

    def excess(x):
        return _excess(coef, shapes, x, base, energy)

    lo, hi = s0.copy(), upper.copy()
    # replace an unbounded horizon by a doubling bracket
    open_ = ~np.isfinite(hi)
    if open_.any():
        b = np.maximum(2.0 * s0[open_], 1.0)
        for _ in range(_MAX_BISECTIONS):
            short = _excess(coef[open_], shapes, b, base[open_], energy[open_]) <= 0
            if not short.any():
                break
            b = np.where(short, 2.0 * b, b)
        else:
            raise ConvergenceError("could not bracket the sojourn time")
        hi[open_] = b
    for _ in range(_MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        above = excess(mid) > 0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all(hi - lo <= BISECTION_RTOL * np.maximum(hi, 1e-300)):
            return 0.5 * (lo + hi)
    raise ConvergenceError(
        f"sojourn inversion did not converge: max bracket {np.max(hi - lo):.3e} at s0 up to {np.max(s0):.3e}"
    )


def sample_transitions(model: MultiStateModel, groups, horizons, rng: np.random.Generator) -> Transitions:
    """Sample paths for many patients at once, each up to its own trial-time horizon.

    ``groups`` and ``horizons`` are arrays of equal length; jumps after a
    patient's horizon are not generated.
    """
    groups = np.asarray(groups, dtype=int)
    horizons = np.asarray(horizons, dtype=float)
    n = len(groups)
    state = np.zeros(n, dtype=int)
    clock = np.zeros(n)
    alive = horizons > 0
    out_p, out_t, out_s, out_k = [], [], [], []

    outgoing = {j: model.outgoing(j) for j in range(model.n_states)}
    while alive.any():
        for j in range(model.n_states):
            idx = np.flatnonzero(alive & (state == j))
            if not idx.size:
                continue
            trs = outgoing[j]
            if not trs:
                alive[idx] = False
                continue
            shapes = np.array([tr.shape for tr in trs])
            coef = np.array([[tr.scale(0) for tr in trs], [tr.scale(1) for tr in trs]])[groups[idx]]
            s0 = clock[idx]
            h = horizons[idx]
            energy = rng.exponential(size=idx.size)
            total = (coef * (h[:, None] ** shapes - s0[:, None] ** shapes) / shapes).sum(axis=1)
            jumps = energy < total
            alive[idx[~jumps]] = False
            idx, coef, s0, energy, h = idx[jumps], coef[jumps], s0[jumps], energy[jumps], h[jumps]
            if not idx.size:
                continue
            if np.all(shapes == shapes[0]):
                g = shapes[0]
                x = (s0**g + g * energy / coef.sum(axis=1)) ** (1.0 / g)
                x = np.minimum(x, h)
            else:
                x = _invert_cumulative(coef, shapes, s0, energy, h)
            weights = coef * x[:, None] ** (shapes - 1.0)
            cum = np.cumsum(weights, axis=1)
            pick = (rng.random(idx.size) * cum[:, -1])[:, None] >= cum
            dest_pos = np.minimum(pick.sum(axis=1), len(trs) - 1)
            dest = np.array([tr.target for tr in trs])[dest_pos]
            out_p.append(idx)
            out_t.append(x)
            out_s.append(np.full(idx.size, j))
            out_k.append(dest)
            state[idx] = dest
            clock[idx] = x
            # a zero-measure tie at the horizon ends the path
            alive[idx[x >= h]] = False

    if out_p:
        patient = np.concatenate(out_p)
        time = np.concatenate(out_t)
        source = np.concatenate(out_s)
        target = np.concatenate(out_k)
        order = np.lexsort((time, patient))
        return Transitions(patient[order], time[order], source[order], target[order])
    empty_i = np.zeros(0, dtype=int)
    return Transitions(empty_i, np.zeros(0), empty_i, empty_i)


def sample_path(model: MultiStateModel, group: int, horizon: float, rng: np.random.Generator) -> PatientPath:
    """One patient's path on ``[0, horizon]``."""
    if not horizon > 0:
        raise ConfigError("horizon must be positive")
    if group not in (0, 1):
        raise ConfigError(f"group must be 0 or 1, got {group!r}")
    tr = sample_transitions(model, [group], [horizon], rng)
    return PatientPath(tuple(zip(tr.time.tolist(), tr.target.tolist())))
