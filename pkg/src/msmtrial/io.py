"""JSON configuration files for models, designs and simulation scenarios.

Schemas live in ``msmtrial/schemas``; every loader validates against them
before building objects, so malformed files fail with a :class:`ConfigError`
naming the offending field.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping

import jsonschema
from referencing import Registry, Resource

from .cohort import ALL_ENTRIES, FIRST_HITTING, EventDefinition, pfs_os_events
from .design import DesignSpec
from .errors import ConfigError
from .model import AccrualPlan, MultiStateModel
from .planning import PlanningAssumptions
from .scenarios import scenario_model
from .simulation import ADAPTIVE, FIXED, ScenarioConfig

SCHEMAS = ("model", "design", "scenario")
DEFAULT_REPLICATES = 10_000


@lru_cache(maxsize=None)
def schema(name: str) -> dict:
    if name not in SCHEMAS:
        raise KeyError(name)
    text = resources.files("msmtrial").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


@lru_cache(maxsize=None)
def _registry() -> Registry:
    resources_ = [(f"msmtrial/{n}.schema.json", Resource.from_contents(schema(n))) for n in SCHEMAS]
    return Registry().with_resources(resources_)


def validate(data, kind: str) -> None:
    """Raise :class:`ConfigError` unless ``data`` matches schema ``kind``."""
    validator = jsonschema.Draft202012Validator(schema(kind), registry=_registry())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(map(str, err.absolute_path)) or "<root>"
        raise ConfigError(f"invalid {kind} file at {where}: {err.message}")


def read_json(path) -> dict:
    path = Path(path)
    try:
        with path.open() as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _parse_key(key: str) -> tuple[int, int]:
    j, k = key.split("->")
    return int(j), int(k)


def _ratios(model: MultiStateModel, spec) -> MultiStateModel:
    if spec is None:
        return model
    if isinstance(spec, list):
        if len(spec) != len(model.transitions):
            raise ConfigError("hazard ratio list needs one entry per model transition")
        return model.with_hazard_ratios(dict(zip(model.transitions, spec)))
    return model.with_hazard_ratios({_parse_key(k): v for k, v in spec.items()})


def model_from_config(data: Mapping, key: str = "hazard_ratios") -> MultiStateModel:
    """Model of a design/scenario mapping with hazard ratios from ``data[key]`` applied."""
    if "scenario" in data:
        model = scenario_model(data["scenario"])
    else:
        model = MultiStateModel.from_dict(data["model"])
    return _ratios(model, data.get(key))


def events_from_config(data: Mapping) -> tuple[EventDefinition, ...]:
    spec = data.get("events", "pfs-os")
    if spec == "pfs-os":
        return tuple(pfs_os_events(FIRST_HITTING))
    if spec == "pfs-os-all-entries":
        return tuple(pfs_os_events(ALL_ENTRIES))
    return tuple(EventDefinition(frozenset(e["states"]), e.get("mode", FIRST_HITTING), e.get("name")) for e in spec)


def plan_from_config(data: Mapping) -> AccrualPlan:
    acc = data["accrual"]
    return AccrualPlan(acc["duration"], acc.get("follow_up", 0.0), acc.get("rate"), acc.get("allocation", 0.5))


def design_from_config(data: Mapping) -> DesignSpec:
    bounds = data.get("a_add_bounds")
    return DesignSpec(
        tuple(data["times"]),
        data.get("alpha", 0.05),
        data.get("family", "pocock"),
        None if data.get("weights") is None else tuple(data["weights"]),
        None if data.get("levels") is None else tuple(data["levels"]),
        plan_from_config(data),
        None if bounds is None else tuple(bounds),
        data.get("target_power", 0.8),
    )


def assumptions_from_config(data: Mapping) -> PlanningAssumptions:
    return PlanningAssumptions(model_from_config(data), plan_from_config(data), data.get("dropout_rate", 0.0))


def load_design(path) -> tuple[DesignSpec, PlanningAssumptions, tuple[EventDefinition, ...], dict]:
    """Design, planning assumptions, events and the raw mapping of a design file."""
    data = read_json(path)
    validate(data, "design")
    return design_from_config(data), assumptions_from_config(data), events_from_config(data), data


def scenario_from_config(data: Mapping, seed: int | None = None, replicates: int | None = None) -> ScenarioConfig:
    """Scenario config; ``seed`` and ``replicates`` override the file's values."""
    validate(data, "scenario")
    seed = data.get("seed") if seed is None else seed
    if seed is None:
        raise ConfigError("a seed is mandatory")
    reps = replicates if replicates is not None else data.get("replicates", DEFAULT_REPLICATES)
    mode = data.get("mode", FIXED)
    planning = None
    if "planning_hazard_ratios" in data:
        planning = model_from_config(data, "planning_hazard_ratios")
    design = design_from_config(data)
    return ScenarioConfig(
        model_from_config(data),
        plan_from_config(data),
        design,
        data["n"],
        reps,
        seed,
        mode,
        events_from_config(data),
        design.a_add_bounds if mode == ADAPTIVE else None,
        planning,
        data.get("dropout_rate", 0.0),
        data.get("name", ""),
    )


def load_scenario(path, seed: int | None = None, replicates: int | None = None) -> ScenarioConfig:
    return scenario_from_config(read_json(path), seed, replicates)


def load_model(path) -> MultiStateModel:
    data = read_json(path)
    validate(data, "model")
    return MultiStateModel.from_dict(data)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")
