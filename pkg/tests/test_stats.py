import math
import warnings
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msmtrial.cohort import ALL_ENTRIES, FIRST_HITTING, Cohort, EventDefinition, PatientRecord, load_cohort, pfs_os_events
from msmtrial.errors import ConfigError, SingularCovarianceError
from msmtrial.sampling import PatientPath
from msmtrial.stats import (
    RankDeficientWarning,
    WeightFunction,
    stage_increment,
    stage_statistic,
    standardize_cholesky,
    statistics,
)

from oracles import classical_logrank, enumerate_statistics

FIXTURES = Path(__file__).parent / "fixtures"

# Four-state model with a back transition so that events can be left and re-entered.
MOVES = {0: (1, 2, 3), 1: (2, 3), 2: (1, 3), 3: ()}


def random_records(rng, n, horizon=4.0, dropout=True):
    records = []
    for i in range(n):
        jumps = []
        s, state = 0.0, 0
        while MOVES[state]:
            s += rng.exponential(1.2)
            if s > horizon:
                break
            state = int(rng.choice(MOVES[state]))
            jumps.append((s, state))
        c = rng.exponential(5.0) if dropout and rng.random() < 0.5 else math.inf
        records.append(PatientRecord(float(rng.uniform(0, 3)), int(i % 2 if rng.random() < 0.7 else rng.integers(2)), c, PatientPath(tuple(jumps)), i + 1))
    return records


def oracle_events(events):
    return [(frozenset(e.states), e.mode == FIRST_HITTING) for e in events]


EVENT_SETS = [
    [EventDefinition({1, 3}), EventDefinition({3})],
    [EventDefinition({2, 3}), EventDefinition({3}), EventDefinition({1})],
    [EventDefinition({1, 2}), EventDefinition({2, 3})],
]


def test_fixture_three_patients_hand_values():
    cohort = load_cohort(FIXTURES / "cohort3.csv")
    u, v = statistics(cohort, pfs_os_events(), 10.0)
    n = cohort.n
    np.testing.assert_allclose(u * math.sqrt(n), [2 / 3, 1 / 2], atol=1e-14)
    np.testing.assert_allclose(v * n, [[2 / 9, 0.0], [0.0, 1 / 4]], atol=1e-14)
    res = stage_statistic(u, v)
    assert res.statistic == pytest.approx(3.0, abs=1e-12)
    assert res.p_value == pytest.approx(math.exp(-1.5), abs=1e-12)


def test_fixture_four_patients_hand_values():
    cohort = load_cohort(FIXTURES / "cohort4.csv")
    u, v = statistics(cohort, pfs_os_events(), 10.0)
    n = cohort.n
    np.testing.assert_allclose(u * math.sqrt(n), [2 / 3, 1 / 2], atol=1e-14)
    np.testing.assert_allclose(v * n, [[13 / 18, 1 / 4], [1 / 4, 1 / 4]], atol=1e-14)
    assert stage_statistic(u, v).statistic == pytest.approx(float(Fraction(18, 17)), abs=1e-12)


def test_fixture_four_patients_interim():
    cohort = load_cohort(FIXTURES / "cohort4.csv")
    u, v = statistics(cohort, pfs_os_events(), 2.5)
    # PFS: +1/2 (s=1), -1/3 (s=2); OS: +1/2 (s=1)
    np.testing.assert_allclose(u * 2, [1 / 6, 1 / 2], atol=1e-14)
    np.testing.assert_allclose(v * 4, [[1 / 4 + 2 / 9, 1 / 4], [1 / 4, 1 / 4]], atol=1e-14)


@pytest.mark.parametrize("events", EVENT_SETS)
@pytest.mark.parametrize("mode", [FIRST_HITTING, ALL_ENTRIES])
def test_matches_enumeration_oracle(events, mode):
    rng = np.random.default_rng(101)
    events = [EventDefinition(e.states, mode) for e in events]
    for _ in range(15):
        records = random_records(rng, int(rng.integers(1, 21)))
        cohort = Cohort.from_records(records)
        for t in (1.5, 4.0, 7.0):
            u, v = statistics(cohort, events, t)
            u_ref, v_ref = enumerate_statistics(records, oracle_events(events), t)
            np.testing.assert_allclose(u, u_ref, rtol=0, atol=1e-12)
            np.testing.assert_allclose(v, v_ref, rtol=0, atol=1e-12)


def test_mixed_modes_rejected():
    cohort = load_cohort(FIXTURES / "cohort4.csv")
    with pytest.raises(ConfigError):
        statistics(cohort, [EventDefinition({1, 2}), EventDefinition({2}, ALL_ENTRIES)], 10.0)


def test_empty_cohort_rejected():
    empty = Cohort.from_records([])
    with pytest.raises(ConfigError):
        statistics(empty, pfs_os_events(), 1.0)


def _swap_groups(records):
    return [PatientRecord(r.entry, 1 - r.group, r.dropout, r.path, r.patient_id) for r in records]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 20), st.floats(0.5, 6.0))
def test_group_label_antisymmetry(seed, n, t):
    records = random_records(np.random.default_rng(seed), n)
    events = EVENT_SETS[0]
    u, v = statistics(Cohort.from_records(records), events, t)
    u2, v2 = statistics(Cohort.from_records(_swap_groups(records)), events, t)
    np.testing.assert_allclose(u2, -u, atol=1e-12)
    np.testing.assert_allclose(v2, v, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_covariance_is_psd(seed, n):
    records = random_records(np.random.default_rng(seed), n)
    _, v = statistics(Cohort.from_records(records), EVENT_SETS[1], 4.0)
    assert np.all(np.linalg.eigvalsh(v) >= -1e-12)


def test_competing_risks_reduce_to_logrank():
    rng = np.random.default_rng(7)
    n = 60
    records = []
    for i in range(n):
        s = rng.exponential(2.0)
        k = int(rng.integers(1, 3))
        records.append(PatientRecord(float(rng.uniform(0, 2)), i % 2, math.inf, PatientPath(((s, k),)), i + 1))
    cohort = Cohort.from_records(records)
    t = 3.0
    u, v = statistics(cohort, [EventDefinition({1}), EventDefinition({2})], t)
    for c, k in enumerate((1, 2)):
        times, observed = [], []
        for r in records:
            c_i = max(t - r.entry, 0.0)
            s, state = r.path.jumps[0]
            times.append(min(s, c_i))
            observed.append(s <= c_i and state == k)
        # unrecruited patients have time 0 and never enter a risk set at positive times
        score, var = classical_logrank(times, observed, [r.group for r in records])
        assert u[c] * math.sqrt(n) == pytest.approx(score, abs=1e-12)
        assert v[c, c] * n == pytest.approx(var, abs=1e-12)
    assert v[0, 1] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 20))
def test_modes_agree_on_illness_death(seed, n):
    rng = np.random.default_rng(seed)
    moves = {0: (1, 2), 1: (2,), 2: ()}
    records = []
    for i in range(n):
        jumps, s, state = [], 0.0, 0
        while moves[state]:
            s += rng.exponential(1.0)
            state = int(rng.choice(moves[state]))
            jumps.append((s, state))
        records.append(PatientRecord(float(rng.uniform(0, 3)), i % 2, math.inf, PatientPath(tuple(jumps)), i + 1))
    cohort = Cohort.from_records(records)
    u1, v1 = statistics(cohort, pfs_os_events(FIRST_HITTING), 4.0)
    u2, v2 = statistics(cohort, pfs_os_events(ALL_ENTRIES), 4.0)
    np.testing.assert_allclose(u1, u2, atol=1e-12)
    np.testing.assert_allclose(v1, v2, atol=1e-12)


def test_cholesky_identity():
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(50):
        records = random_records(rng, 20)
        du, dv = stage_increment(Cohort.from_records(records), EVENT_SETS[0], 1.5, 4.0)
        if np.linalg.matrix_rank(dv) < 2 or np.linalg.cond(dv) > 1e8:
            continue
        z = standardize_cholesky(du, dv)
        assert z @ z == pytest.approx(du @ np.linalg.solve(dv, du), rel=1e-10, abs=1e-12)
        res = stage_statistic(du, dv)
        assert res.statistic == pytest.approx(z @ z, rel=1e-10, abs=1e-12)
        checked += 1
    assert checked > 20


def test_stage_increment_is_difference():
    cohort = load_cohort(FIXTURES / "cohort4.csv")
    du, dv = stage_increment(cohort, pfs_os_events(), 2.5, 10.0)
    u1, v1 = statistics(cohort, pfs_os_events(), 2.5)
    u2, v2 = statistics(cohort, pfs_os_events(), 10.0)
    np.testing.assert_allclose(du, u2 - u1)
    np.testing.assert_allclose(dv, v2 - v1)
    with pytest.raises(ConfigError):
        stage_increment(cohort, pfs_os_events(), 5.0, 2.5)


def test_rank_deficient_uses_pseudo_inverse_and_keeps_df():
    du = np.array([1.0, 1.0])
    dv = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.warns(RankDeficientWarning):
        res = stage_statistic(du, dv)
    assert res.rank == 1 and res.rank_deficient
    assert res.statistic == pytest.approx(1.0)
    assert res.p_value == pytest.approx(math.exp(-0.5))
    assert res.z is None
    with pytest.raises(SingularCovarianceError, match="invertibility_report"):
        standardize_cholesky(du, dv)


def test_weights_scale_contributions():
    cohort = load_cohort(FIXTURES / "cohort3.csv")
    u, v = statistics(cohort, pfs_os_events(), 10.0)
    uw, vw = statistics(cohort, pfs_os_events(), 10.0, WeightFunction({(0, 1): 2.0, (1, 2): 3.0}))
    # PFS counts only the 0->1 entry of patient 1; OS only the 1->2 entry of patient 1
    np.testing.assert_allclose(uw, [2 * u[0], 3 * u[1]])
    np.testing.assert_allclose(np.diag(vw), [4 * v[0, 0], 9 * v[1, 1]])
    callable_w = WeightFunction({(0, 1): lambda t, s: np.full(np.shape(s), 2.0)})
    np.testing.assert_allclose(statistics(cohort, pfs_os_events(), 10.0, callable_w)[0][0], 2 * u[0])


def test_zero_statistic_without_events():
    records = [PatientRecord(0.0, g, math.inf, PatientPath(), i + 1) for i, g in enumerate((0, 1, 0))]
    u, v = statistics(Cohort.from_records(records), pfs_os_events(), 5.0)
    assert np.all(u == 0) and np.all(v == 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        res = stage_statistic(u, v)
    assert res.p_value == 1.0 and res.rank == 0
