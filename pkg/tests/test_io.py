import json
from pathlib import Path

import pytest

from msmtrial.cohort import ALL_ENTRIES
from msmtrial.errors import ConfigError
from msmtrial.io import load_design, load_model, load_scenario, read_json, scenario_from_config, validate, write_json
from msmtrial.scenarios import scenario_model
from msmtrial.simulation import ADAPTIVE

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
ALL_CONFIGS = sorted(CONFIGS.rglob("*.json"))


def test_configs_present():
    assert len(list((CONFIGS / "table2").glob("*.json"))) == 12
    assert len(list((CONFIGS / "table3").glob("*.json"))) == 4


@pytest.mark.parametrize("path", ALL_CONFIGS, ids=lambda p: p.name)
def test_every_shipped_config_loads(path):
    data = read_json(path)
    validate(data, "design")
    if "n" in data:
        cfg = load_scenario(path, seed=1, replicates=2)
        assert cfg.n == data["n"] and cfg.replicates == 2
    else:
        design, assumptions, events, _ = load_design(path)
        assert design.m == len(data["times"])


def test_table2_configs_match_their_names():
    for path in (CONFIGS / "table2").glob("*.json"):
        scen, n, fam = path.stem.split("_")
        cfg = load_scenario(path, seed=1)
        assert cfg.model == scenario_model(int(scen[1:]))
        assert cfg.n == int(n[1:])
        assert cfg.design.family == ("pocock" if fam == "P" else "obrien-fleming")
        assert cfg.replicates == 10_000


def test_adaptive_config():
    cfg = load_scenario(CONFIGS / "adaptive" / "a3_adaptive_d13_amax30.json", seed=1)
    assert cfg.mode == ADAPTIVE and cfg.a_bounds == (3.0, 30.0)
    assert cfg.model.intensity(0, 1).hazard_ratio == pytest.approx(1 / 1.3)
    assert cfg.planning_model.intensity(0, 1).hazard_ratio == pytest.approx(1 / 1.5)
    assert cfg.plan.rate == 20.0 and cfg.n == 480


def test_seed_is_mandatory():
    data = read_json(CONFIGS / "table2" / "s1_n250_P.json")
    with pytest.raises(ConfigError, match="seed"):
        scenario_from_config(data)
    assert scenario_from_config({**data, "seed": 4}).seed == 4


def test_schema_errors_name_the_field():
    data = read_json(CONFIGS / "table2" / "s1_n250_P.json")
    with pytest.raises(ConfigError, match="family"):
        validate({**data, "family": "haybittle"}, "scenario")
    with pytest.raises(ConfigError, match="times"):
        validate({**data, "times": "soon"}, "design")
    with pytest.raises(ConfigError):
        validate({k: v for k, v in data.items() if k != "n"}, "scenario")


def test_malformed_json_reports_position(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"times": [1, 2],\n "alpha": }')
    with pytest.raises(ConfigError, match="line 2"):
        read_json(bad)
    with pytest.raises(ConfigError):
        read_json(tmp_path / "missing.json")


def test_model_file_round_trip(tmp_path):
    model = scenario_model(3, (0.6, 1.0, 0.85))
    write_json(model.to_dict(), tmp_path / "m.json")
    assert load_model(tmp_path / "m.json") == model


def test_event_variants(tmp_path):
    data = read_json(CONFIGS / "table2" / "s1_n250_P.json")
    cfg = scenario_from_config({**data, "events": "pfs-os-all-entries"}, seed=1)
    assert all(e.mode == ALL_ENTRIES for e in cfg.events)
    cfg = scenario_from_config({**data, "events": [{"states": [2], "name": "OS"}]}, seed=1)
    assert len(cfg.events) == 1 and cfg.events[0].label == "OS"
    cfg = scenario_from_config({**data, "hazard_ratios": [0.8, 1.0, 0.85]}, seed=1)
    assert cfg.model.hazard_ratios == {(0, 1): 0.8, (0, 2): 1.0, (1, 2): 0.85}
    with pytest.raises(ConfigError):
        scenario_from_config({**data, "hazard_ratios": [0.8]}, seed=1)
    path = tmp_path / "s.json"
    path.write_text(json.dumps({**data, "seed": 9}))
    assert load_scenario(path).seed == 9
