import math
from dataclasses import replace
from pathlib import Path

import pytest

from msmtrial.design import DesignSpec
from msmtrial.errors import ConfigError, UnreachablePowerError
from msmtrial.io import load_scenario
from msmtrial.scenarios import TIMES, scenario_model, scenario_plan
from msmtrial.simulation import (
    ADAPTIVE,
    ScenarioConfig,
    calibrate_sample_size,
    rates_for_families,
    run_outcomes,
    run_replicate,
    run_scenario,
    summarize,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def config(n=60, replicates=40, seed=3, ratios=(1.0, 1.0, 1.0), family="pocock"):
    return ScenarioConfig(
        scenario_model(1, ratios), scenario_plan(), DesignSpec(TIMES, family=family, plan=scenario_plan()), n, replicates, seed
    )


def test_replicates_are_deterministic():
    cfg = config()
    assert run_replicate(cfg, 7) == run_replicate(cfg, 7)
    assert run_replicate(cfg, 7) != run_replicate(cfg, 8)
    assert run_replicate(cfg, 7) != run_replicate(replace(cfg, seed=4), 7)


def test_worker_count_does_not_change_results():
    cfg = config(replicates=24)
    serial = run_outcomes(cfg, workers=1)
    parallel = run_outcomes(cfg, workers=3)
    assert serial == parallel
    assert run_scenario(cfg) == summarize(cfg, parallel)


def test_invalid_configs():
    with pytest.raises(ConfigError, match="empty cohort"):
        config(n=0)
    with pytest.raises(ConfigError):
        config(seed=None)
    with pytest.raises(ConfigError):
        config(replicates=0)
    with pytest.raises(ConfigError):
        replace(config(), mode=ADAPTIVE)
    with pytest.raises(ConfigError):
        replace(config(), mode="bayesian")


def test_replicate_outcome_fields():
    cfg = config()
    o = run_replicate(cfg, 0)
    assert len(o.p_values) == 2 and all(0 < p <= 1 for p in o.p_values)
    assert o.stage in (1, 2)
    assert o.accrual == (3.0 if o.stage == 2 else 2.5)


def test_null_rejection_rate_sanity():
    cfg = config(n=100, replicates=400, seed=21)
    res = run_scenario(cfg)
    assert abs(res.rate - 0.05) < 4 * math.sqrt(0.05 * 0.95 / 400)
    assert sum(res.stage_rejections) == res.rejections
    row = res.csv_row()
    assert row[0] == "" and row[1] == 400


def test_alternative_has_power():
    cfg = config(n=400, replicates=60, seed=22, ratios=(0.6, 1.0, 0.75))
    assert run_scenario(cfg).rate > 0.5


def test_rates_for_families_share_p_values():
    cfg = config(n=80, replicates=50, seed=23)
    outcomes = run_outcomes(cfg)
    rates = rates_for_families(cfg, outcomes, ["pocock", "obf"])
    assert rates["pocock"].rejections == summarize(cfg, outcomes).rejections
    of_cfg = replace(cfg, design=replace(cfg.design, family="obf"))
    assert rates["obrien-fleming"].rejections == run_scenario(of_cfg).rejections


def test_adaptive_smoke():
    cfg = load_scenario(CONFIGS / "adaptive" / "a3_adaptive_d13_amax30.json", seed=5, replicates=4)
    outcomes = run_outcomes(cfg)
    for o in outcomes:
        assert o.fixed_rejected is not None
        if o.stage == 2:
            assert 3.0 <= o.a_add <= 30.0
            assert o.accrual == pytest.approx(18.0 + o.a_add)
        else:
            assert o.accrual == 18.0 and o.a_add is None
        assert o.fixed_accrual in (18.0, 24.0)
    res = summarize(cfg, outcomes)
    assert res.fixed_rate is not None and res.fixed_se is not None


def test_calibration_on_null_is_unreachable():
    with pytest.raises(UnreachablePowerError):
        calibrate_sample_size(config(replicates=20), target=0.8, upper=64)


def test_calibration_finds_small_n():
    cfg = config(replicates=40, seed=30, ratios=(0.3, 1.0, 0.4))
    res = calibrate_sample_size(cfg, target=0.8)
    assert res.n >= 2 and res.power >= 0.8 - 2 * math.sqrt(0.16 / 40)
    assert dict(res.trace)[res.n] == res.power
    below = [p for n, p in res.trace if n < res.n]
    assert all(p < 0.8 - 2 * math.sqrt(0.16 / 40) for p in below)
