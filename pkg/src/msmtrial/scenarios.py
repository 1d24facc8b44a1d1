"""Bundled illness-death scenarios for progression-free and overall survival.

States: 0 initial, 1 progressed, 2 dead.  All three presets share the
analysis calendar ``t = (2.5, 5)`` and accrual ``a = 3`` and use the
``"weibull"`` parametrization.
"""

from __future__ import annotations

from .errors import ConfigError
from .model import AccrualPlan, MultiStateModel, TransitionIntensity

STATE_NAMES = ("initial", "progressed", "dead")
TRANSITIONS = ((0, 1), (0, 2), (1, 2))
TIMES = (2.5, 5.0)
ACCRUAL = 3.0

_PRESETS = {
    1: {"shape": (1.0, 1.0, 1.0), "rate": (0.6, 0.075, 0.9)},
    2: {"shape": (1.3, 1.3, 1.3), "rate": (0.85, 0.1, 0.3)},
    3: {"shape": (1.5, 0.5, 0.85), "rate": (0.57, 0.065, 1.1)},
}

# Reference event fractions (PFS at t1, t2; OS at t1, t2) per scenario.
EVENT_FRACTIONS = {
    1: (0.4309, 0.8889, 0.2411, 0.7448),
    2: (0.5216, 0.9804, 0.1895, 0.6936),
    3: (0.4409, 0.9571, 0.2352, 0.7717),
}


def illness_death(rates, shapes=(1.0, 1.0, 1.0), hazard_ratios=(1.0, 1.0, 1.0), form: str = "weibull") -> MultiStateModel:
    """Illness-death model with intensities for ``0->1``, ``0->2``, ``1->2`` in that order."""
    if not (len(rates) == len(shapes) == len(hazard_ratios) == 3):
        raise ConfigError("illness-death model needs three rates, shapes and hazard ratios")
    trs = tuple(
        TransitionIntensity(j, k, r, g, d, form)
        for (j, k), r, g, d in zip(TRANSITIONS, rates, shapes, hazard_ratios)
    )
    return MultiStateModel(3, trs, STATE_NAMES)


def scenario_model(number: int, hazard_ratios=(1.0, 1.0, 1.0)) -> MultiStateModel:
    """Preset ``number`` (1, 2 or 3) with treatment hazard ratios ``(d01, d02, d12)``."""
    try:
        preset = _PRESETS[int(number)]
    except (KeyError, ValueError):
        raise ConfigError(f"unknown scenario {number!r}; expected 1, 2 or 3") from None
    return illness_death(preset["rate"], preset["shape"], hazard_ratios)


def scenario_plan() -> AccrualPlan:
    return AccrualPlan(ACCRUAL, TIMES[-1] - ACCRUAL)
