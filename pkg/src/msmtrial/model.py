"""Markovian multi-state models with Weibull transition intensities.

A model has states ``0..n_states-1``; every patient starts in state 0.  Each
transition ``j -> k`` carries a Weibull intensity in the control group,
multiplied by ``hazard_ratio`` in the treatment group.  Two parametrizations
are supported:

``"power"``
    ``rate * s**(shape - 1)``, cumulative ``rate * s**shape / shape``.
``"weibull"``
    ``rate * shape * s**(shape - 1)``, cumulative ``rate * s**shape``.

Both coincide for ``shape == 1``.  The bundled simulation scenarios use the
``"weibull"`` form, under which their event fractions are reproduced.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError
from .numerics import (
    CumulativeIntegral,
    VGrid,
    occupation_on_grid,
    refined,
    rk4_occupation,
    time_power,
)

PARAMETRIZATIONS = ("power", "weibull")


def _check_group(group):
    if group not in (0, 1):
        raise ConfigError(f"group must be 0 or 1, got {group!r}")


def _positive(name, value):
    value = float(value)
    if not math.isfinite(value) or value <= 0:
        raise ConfigError(f"{name} must be a positive finite number, got {value!r}")
    return value


@dataclass(frozen=True)
class TransitionIntensity:
    """Weibull intensity of the transition ``source -> target``.

    ``form`` selects the parametrization (see module docstring).
    """

    source: int
    target: int
    rate: float
    shape: float = 1.0
    hazard_ratio: float = 1.0
    form: str = "power"

    def __post_init__(self):
        for name in ("source", "target"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 0:
                raise ConfigError(f"{name} must be a nonnegative integer state id, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.source == self.target:
            raise ConfigError(f"self-loop {self.source}->{self.target} is not a transition")
        object.__setattr__(self, "rate", _positive("rate", self.rate))
        object.__setattr__(self, "shape", _positive("shape", self.shape))
        object.__setattr__(self, "hazard_ratio", _positive("hazard_ratio", self.hazard_ratio))
        if self.form not in PARAMETRIZATIONS:
            raise ConfigError(f"parametrization must be one of {PARAMETRIZATIONS}, got {self.form!r}")

    @property
    def key(self) -> tuple[int, int]:
        return (self.source, self.target)

    def scale(self, group: int = 0) -> float:
        """Coefficient ``c`` of the intensity ``c * s**(shape - 1)`` in ``group``."""
        c = self.rate * (self.shape if self.form == "weibull" else 1.0)
        return c * (self.hazard_ratio if group == 1 else 1.0)

    def hazard(self, s, group: int = 0):
        s = np.asarray(s, dtype=float)
        return self.scale(group) * s ** (self.shape - 1.0)

    def cumulative(self, s1, s2, group: int = 0):
        s1 = np.asarray(s1, dtype=float)
        s2 = np.asarray(s2, dtype=float)
        return self.scale(group) * (s2**self.shape - s1**self.shape) / self.shape


@dataclass(frozen=True)
class MultiStateModel:
    """State space ``0..n_states-1`` and its transition intensities.

    Construction rejects self-loops, duplicate ``(source, target)`` pairs,
    out-of-range states and a state 0 without any outgoing transition.
    """

    n_states: int
    intensities: tuple[TransitionIntensity, ...]
    state_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "intensities", tuple(self.intensities))
        if int(self.n_states) != self.n_states or self.n_states < 1:
            raise ConfigError(f"n_states must be a positive integer, got {self.n_states!r}")
        seen = set()
        for tr in self.intensities:
            if not isinstance(tr, TransitionIntensity):
                raise ConfigError(f"expected TransitionIntensity, got {type(tr).__name__}")
            if tr.source >= self.n_states or tr.target >= self.n_states:
                raise ConfigError(f"transition {tr.source}->{tr.target} outside states 0..{self.n_states - 1}")
            if tr.key in seen:
                raise ConfigError(f"duplicate intensity for transition {tr.source}->{tr.target}")
            seen.add(tr.key)
        if len({tr.form for tr in self.intensities}) > 1:
            raise ConfigError("all intensities of a model must share one parametrization")
        if not any(tr.source == 0 for tr in self.intensities):
            raise ConfigError("state 0 has no outgoing intensity")
        if self.state_names is not None:
            names = tuple(str(n) for n in self.state_names)
            if len(names) != self.n_states:
                raise ConfigError("state_names must name every state")
            object.__setattr__(self, "state_names", names)

    @cached_property
    def _by_key(self) -> dict[tuple[int, int], TransitionIntensity]:
        return {tr.key: tr for tr in self.intensities}

    @property
    def transitions(self) -> tuple[tuple[int, int], ...]:
        return tuple(tr.key for tr in self.intensities)

    @property
    def absorbing_states(self) -> frozenset[int]:
        sources = {tr.source for tr in self.intensities}
        return frozenset(s for s in range(self.n_states) if s not in sources)

    @property
    def parametrization(self) -> str:
        return self.intensities[0].form

    @property
    def is_homogeneous(self) -> bool:
        return all(tr.shape == 1.0 for tr in self.intensities)

    def intensity(self, source: int, target: int) -> TransitionIntensity:
        try:
            return self._by_key[(source, target)]
        except KeyError:
            raise ConfigError(f"model has no transition {source}->{target}") from None

    def outgoing(self, state: int) -> tuple[TransitionIntensity, ...]:
        return tuple(tr for tr in self.intensities if tr.source == state)

    def generator(self, s: float, group: int = 0, taboo: Iterable[int] = ()) -> np.ndarray:
        """Intensity matrix at trial time ``s > 0``; ``taboo`` states are made absorbing."""
        taboo = frozenset(taboo)
        Q = np.zeros((self.n_states, self.n_states))
        for tr in self.intensities:
            if tr.source in taboo:
                continue
            rate = float(tr.hazard(s, group))
            Q[tr.source, tr.target] += rate
            Q[tr.source, tr.source] -= rate
        return Q

    def for_group(self, group: int) -> "MultiStateModel":
        """Model whose control-group intensities are this model's ``group`` intensities."""
        _check_group(group)
        return replace(
            self,
            intensities=tuple(
                replace(tr, rate=tr.rate * (tr.hazard_ratio if group == 1 else 1.0), hazard_ratio=1.0)
                for tr in self.intensities
            ),
        )

    def with_hazard_ratios(self, ratios: Mapping[tuple[int, int], float]) -> "MultiStateModel":
        unknown = set(ratios) - set(self.transitions)
        if unknown:
            raise ConfigError(f"hazard ratios given for unknown transitions {sorted(unknown)}")
        return replace(
            self,
            intensities=tuple(replace(tr, hazard_ratio=ratios.get(tr.key, tr.hazard_ratio)) for tr in self.intensities),
        )

    @property
    def hazard_ratios(self) -> dict[tuple[int, int], float]:
        return {tr.key: tr.hazard_ratio for tr in self.intensities}

    def to_dict(self) -> dict:
        out = {
            "states": self.n_states,
            "parametrization": self.parametrization,
            "transitions": [
                {"from": tr.source, "to": tr.target, "lambda": tr.rate, "gamma": tr.shape, "delta": tr.hazard_ratio}
                for tr in self.intensities
            ],
        }
        if self.state_names is not None:
            out["state_names"] = list(self.state_names)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "MultiStateModel":
        try:
            states = data["states"]
            rows = data["transitions"]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"model definition needs 'states' and 'transitions': {exc}") from None
        names = data.get("state_names")
        form = data.get("parametrization", "power")
        if isinstance(states, list):
            names = names or states
            states = len(states)
        intensities = []
        for i, row in enumerate(rows):
            try:
                intensities.append(
                    TransitionIntensity(
                        row["from"],
                        row["to"],
                        row["lambda"],
                        row.get("gamma", 1.0),
                        row.get("delta", 1.0),
                        form,
                    )
                )
            except KeyError as exc:
                raise ConfigError(f"transition #{i} is missing field {exc}") from None
            except TypeError as exc:
                raise ConfigError(f"transition #{i} is malformed: {exc}") from None
        return cls(states, tuple(intensities), tuple(names) if names else None)


@dataclass(frozen=True)
class AccrualPlan:
    """Uniform recruitment on ``[0, duration]`` followed by ``follow_up``.

    ``rate`` is patients per time unit (optional; only used to turn accrual
    durations into sample sizes), ``allocation`` the share randomized to
    group 1.
    """

    duration: float
    follow_up: float = 0.0
    rate: float | None = None
    allocation: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "duration", _positive("accrual duration", self.duration))
        if not self.follow_up >= 0:
            raise ConfigError("follow-up must be nonnegative")
        if self.rate is not None:
            object.__setattr__(self, "rate", _positive("accrual rate", self.rate))
        if not 0 < self.allocation < 1:
            raise ConfigError("allocation fraction must lie in (0, 1)")

    def recruited_share(self, t):
        """``P(R <= t)`` for ``R`` uniform on ``[0, duration]``."""
        return np.clip(np.asarray(t, dtype=float) / self.duration, 0.0, 1.0)


@dataclass(frozen=True)
class ModelReport:
    absorbing: frozenset[int]
    reachable: frozenset[int]
    absorption_possible: bool
    stuck_states: frozenset[int] = field(default_factory=frozenset)


def validate_model(model: MultiStateModel) -> ModelReport:
    """Report absorbing states, states reachable from 0, and absorbability.

    ``absorption_possible`` is true when every reachable non-absorbing state
    has a path to some absorbing state.
    """
    succ: dict[int, set[int]] = {s: set() for s in range(model.n_states)}
    for tr in model.intensities:
        succ[tr.source].add(tr.target)
    reachable = {0}
    queue = deque([0])
    while queue:
        s = queue.popleft()
        for t in succ[s]:
            if t not in reachable:
                reachable.add(t)
                queue.append(t)
    absorbing = model.absorbing_states
    pred: dict[int, set[int]] = {s: set() for s in range(model.n_states)}
    for tr in model.intensities:
        pred[tr.target].add(tr.source)
    can_absorb = set(absorbing)
    queue = deque(absorbing)
    while queue:
        s = queue.popleft()
        for p in pred[s]:
            if p not in can_absorb:
                can_absorb.add(p)
                queue.append(p)
    stuck = frozenset(s for s in reachable if s not in can_absorb)
    return ModelReport(frozenset(absorbing), frozenset(reachable), not stuck, stuck)


def cumulative_intensity(model: MultiStateModel, source: int, target: int, s1: float, s2: float, group: int = 0) -> float:
    """Closed-form ``int_{s1}^{s2} lambda^{source,target}_group(u) du``."""
    _check_group(group)
    if not 0 <= s1 <= s2:
        raise ConfigError(f"need 0 <= s1 <= s2, got s1={s1}, s2={s2}")
    return float(model.intensity(source, target).cumulative(s1, s2, group))


def occupation_probabilities(model: MultiStateModel, s: float, group: int = 0, taboo: Iterable[int] = ()) -> np.ndarray:
    """Distribution of ``X(s)`` for a start in state 0 (``taboo`` states absorbing)."""
    _check_group(group)
    if s < 0:
        raise ConfigError("trial time must be nonnegative")
    x0 = np.zeros(model.n_states)
    x0[0] = 1.0
    if s == 0:
        return x0
    taboo = frozenset(taboo)
    if model.is_homogeneous:
        return x0 @ expm(model.generator(1.0, group, taboo) * s)
    p = time_power([model])
    return rk4_occupation(model, group, np.array([0.0, s ** (1.0 / p)]), p, taboo)[-1]


def state_occupation(model: MultiStateModel, state: int, s: float, group: int = 0) -> float:
    """``P(X(s) = state)`` by the Kolmogorov forward equations."""
    if not 0 <= state < model.n_states:
        raise ConfigError(f"unknown state {state}")
    return float(occupation_probabilities(model, s, group)[state])


def hitting_cdf(model: MultiStateModel, event_states: Iterable[int], s: float, group: int = 0) -> float:
    """``P(T^E <= s)`` where ``T^E`` is the first entry time into ``event_states``."""
    E = frozenset(event_states)
    probs = occupation_probabilities(model, s, group, taboo=E)
    return float(sum(probs[k] for k in E))


def expected_event_fraction(
    model: MultiStateModel,
    event_states: Iterable[int],
    t: float,
    plan: AccrualPlan,
    allocation: float | None = None,
) -> float:
    """Expected share of all recruited patients with an observed ``E`` event by calendar ``t``.

    ``pi(t) = (1/a) int_0^{min(a,t)} P(T^E <= t - r) dr``, with the hitting
    distribution mixed over groups by the allocation fraction.
    """
    if t <= 0:
        return 0.0
    E = frozenset(event_states)
    rho = plan.allocation if allocation is None else allocation
    p = time_power([model])

    def build(n_panels):
        grid = VGrid(t, p, n_panels)
        cdf = np.zeros_like(grid.u)
        for group, weight in ((0, 1.0 - rho), (1, rho)):
            occ = occupation_on_grid(model, group, grid, taboo=E)
            cdf += weight * occ[:, sorted(E)].sum(axis=1)
        return CumulativeIntegral(grid, cdf)

    integral = refined(build)
    a = plan.duration
    lo = t - min(a, t)
    return float((integral(t) - integral(lo)) / a)
