import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msmtrial.cohort import (
    Cohort,
    EventDefinition,
    PatientRecord,
    hitting_time,
    load_cohort,
    observe_at,
    pfs_os_events,
    risk_sets,
    save_cohort,
)
from msmtrial.errors import CohortFormatError, ConfigError
from msmtrial.sampling import PatientPath

from oracles import _at_risk, _censor

FIXTURES = Path(__file__).parent / "fixtures"
MOVES = {0: (1, 2, 3), 1: (2, 3), 2: (1, 3), 3: ()}


def random_records(rng, n, horizon=4.0):
    records = []
    for i in range(n):
        jumps, s, state = [], 0.0, 0
        while MOVES[state]:
            s += rng.exponential(1.2)
            if s > horizon:
                break
            state = int(rng.choice(MOVES[state]))
            jumps.append((s, state))
        c = rng.exponential(5.0) if rng.random() < 0.5 else math.inf
        records.append(PatientRecord(float(rng.uniform(0, 3)), int(rng.integers(2)), c, PatientPath(tuple(jumps)), i + 1))
    return records


def test_observe_at_examples():
    path = PatientPath(((3.0, 1),))
    obs = observe_at(PatientRecord(1.0, 0, math.inf, path), 2.0)
    assert obs.path.jumps == () and obs.censored_at == 1.0
    obs = observe_at(PatientRecord(0.0, 0, 2.0, PatientPath(((1.0, 1), (3.0, 2)))), 10.0)
    assert obs.path.jumps == ((1.0, 1),) and obs.censored_at == 2.0
    obs = observe_at(PatientRecord(2.6, 1, math.inf, path), 2.5)
    assert not obs.recruited and obs.path.jumps == ()
    with pytest.raises(ConfigError):
        observe_at(PatientRecord(0.0, 0), -1.0)


def test_hitting_time_examples():
    rec = PatientRecord(0.0, 0, math.inf, PatientPath(((1.0, 1), (4.0, 2))))
    assert hitting_time(rec, {2}) == 4.0
    assert hitting_time(rec, {1, 2}) == 1.0
    censored = observe_at(PatientRecord(0.0, 0, 0.5, rec.path), 10.0)
    assert hitting_time(censored, {1, 2}) is None


def test_all_in_state_zero():
    records = [PatientRecord(0.0, i % 2, math.inf, PatientPath(), i + 1) for i in range(4)]
    records.append(PatientRecord(0.0, 0, math.inf, PatientPath(((2.0, 1),)), 5))
    table = risk_sets(Cohort.from_records(records), pfs_os_events(), 3.0, n_states=3)
    assert table.times.tolist() == [2.0]
    assert table.at_risk[0][0] == 5


def test_left_limit_convention():
    rec = PatientRecord(0.0, 1, math.inf, PatientPath(((1.0, 1),)))
    other = PatientRecord(0.0, 0, math.inf, PatientPath(((2.0, 2),)))
    table = risk_sets(Cohort.from_records([rec, other]), pfs_os_events(), 5.0, n_states=3)
    assert table.times.tolist() == [1.0, 2.0]
    # at s=1 the first patient still counts in state 0 and in the PFS stratum
    assert table.at_risk[0].tolist() == [2, 1]
    assert table.event_at_risk[(0, 0)].tolist() == [2, 1]
    assert table.at_risk[1].tolist() == [0, 1]
    assert table.at_risk_treated[1].tolist() == [0, 1]


def test_fixture_hand_counts():
    table = risk_sets(load_cohort(FIXTURES / "cohort3.csv"), pfs_os_events(), 10.0, n_states=3)
    assert table.times.tolist() == [1.0, 2.0, 3.0, 4.0]
    assert table.at_risk[0].tolist() == [3, 2, 1, 0]
    assert table.at_risk_treated[0].tolist() == [1, 0, 0, 0]
    assert table.at_risk[1].tolist() == [0, 1, 1, 2]
    assert table.at_risk_treated[1].tolist() == [0, 1, 1, 1]
    assert table.at_risk[2].tolist() == [0, 0, 1, 1]
    assert table.event_at_risk[(0, 0)].tolist() == [3, 2, 1, 0]
    assert table.event_at_risk[(1, 1)].tolist() == [0, 1, 1, 2]
    assert (1, 0) not in table.event_at_risk
    snap = table.snapshot(3)
    assert snap["s"] == 4.0 and snap["Y"] == {0: 0, 1: 2, 2: 1}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.floats(0.5, 7.0))
def test_risk_sets_match_brute_force(seed, n, t):
    records = random_records(np.random.default_rng(seed), n)
    events = [EventDefinition({1, 3}), EventDefinition({3}), EventDefinition({2, 3})]
    table = risk_sets(Cohort.from_records(records), events, t, n_states=4)
    for i, s in enumerate(table.times):
        for j in range(4):
            y, y1 = _at_risk(records, t, s, j, None)
            assert (table.at_risk[j][i], table.at_risk_treated[j][i]) == (y, y1)
            for e, ev in enumerate(events):
                if j in ev.states:
                    continue
                y, y1 = _at_risk(records, t, s, j, ev.states)
                assert (table.event_at_risk[(j, e)][i], table.event_at_risk_treated[(j, e)][i]) == (y, y1)
        # conservation over states
        observed = sum(1 for r in records if 0 < s <= _censor(r, t))
        assert sum(table.at_risk[j][i] for j in range(4)) == observed


def test_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    cohort = Cohort.from_records(random_records(rng, 30))
    save_cohort(cohort, tmp_path / "c.csv")
    assert load_cohort(tmp_path / "c.csv") == cohort
    fixture = load_cohort(FIXTURES / "cohort4.csv")
    save_cohort(fixture, tmp_path / "f.csv")
    assert load_cohort(tmp_path / "f.csv") == fixture


def _write(path, text):
    path.write_text(text)
    return path


HEADER = "patient_id,R,Z,Ctilde,from_state,to_state,s\n"


def test_schema_example(tmp_path):
    c = load_cohort(_write(tmp_path / "a.csv", HEADER + "1,0.5,1,,0,1,1.2\n"))
    assert c.n == 1 and len(c.transitions) == 1
    assert c.entry[0] == 0.5 and c.group[0] == 1 and math.isinf(c.dropout[0])


@pytest.mark.parametrize(
    "body, line",
    [
        ("1,0,1,,0,1,1.0\n1,0,1,,1,2,1.0\n", 3),  # duplicate (id, s)
        ("1,0,1,,0,1,2.0\n1,0,1,,1,2,1.0\n", 3),  # non-monotone
        ("1,0,1,,0,1,1.0\n2,0,1,,0,x,1.0\n", 3),  # bad number
        ("1,0,2,,0,1,1.0\n", 2),  # bad group
        ("1,0,1,,0,1\n", 2),  # short row
        ("1,0,1,,1,2,1.0\n", 2),  # path does not start in 0
        ("1,0,1,,0,1,1.0\n1,1,1,,1,2,2.0\n", 3),  # inconsistent entry
    ],
)
def test_malformed_rows_report_line(tmp_path, body, line):
    with pytest.raises(CohortFormatError) as info:
        load_cohort(_write(tmp_path / "b.csv", HEADER + body))
    assert info.value.line == line
    assert f":{line}:" in str(info.value)


def test_missing_columns_and_file(tmp_path):
    with pytest.raises(CohortFormatError):
        load_cohort(_write(tmp_path / "c.csv", "patient_id,R\n1,0\n"))
    with pytest.raises(ConfigError):
        load_cohort(tmp_path / "absent.csv")


def test_roster_adds_patients_without_transitions():
    c = load_cohort(FIXTURES / "cohort4.csv")
    assert c.n == 4
    assert c.ids.tolist() == [1, 2, 3, 4]


def test_cohort_validation():
    from msmtrial.sampling import Transitions

    empty = Transitions(np.zeros(0, int), np.zeros(0), np.zeros(0, int), np.zeros(0, int))
    with pytest.raises(ConfigError):
        Cohort([0.0], [2], [math.inf], empty)
    with pytest.raises(ConfigError):
        Cohort([0.0, 1.0], [0, 1], [math.inf, math.inf], empty, ids=[1, 1])
    bad = Transitions(np.array([0]), np.array([1.0]), np.array([1]), np.array([2]))
    with pytest.raises(ConfigError):
        Cohort([0.0], [0], [math.inf], bad)


def test_subset_keeps_ids():
    c = load_cohort(FIXTURES / "cohort4.csv")
    sub = c.subset([False, True, False, True])
    assert sub.ids.tolist() == [2, 4]
    assert sub.records()[0].path.jumps == ((2.0, 1), (3.0, 2))


def test_event_definition_rules():
    with pytest.raises(ConfigError):
        EventDefinition(set())
    with pytest.raises(ConfigError):
        EventDefinition({0, 1})
    with pytest.raises(ConfigError):
        EventDefinition({1}, "sometimes")
    assert EventDefinition({2, 1}).label == "{1,2}"
