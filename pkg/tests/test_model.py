import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp

from msmtrial.errors import ConfigError
from msmtrial.model import (
    AccrualPlan,
    MultiStateModel,
    TransitionIntensity,
    cumulative_intensity,
    expected_event_fraction,
    hitting_cdf,
    occupation_probabilities,
    state_occupation,
    validate_model,
)
from msmtrial.scenarios import EVENT_FRACTIONS, TIMES, illness_death, scenario_model, scenario_plan


def fig2_model():
    keys = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 1), (2, 3)]
    return MultiStateModel(4, tuple(TransitionIntensity(j, k, 0.1 * (i + 1)) for i, (j, k) in enumerate(keys)))


def test_validate_illness_death():
    rep = validate_model(illness_death((0.6, 0.075, 0.9)))
    assert rep.absorbing == {2}
    assert rep.reachable == {0, 1, 2}
    assert rep.absorption_possible


def test_validate_fig2():
    rep = validate_model(fig2_model())
    assert rep.absorbing == {3}
    assert rep.absorption_possible


def test_rejects_degenerate_models():
    with pytest.raises(ConfigError):
        MultiStateModel(1, ())
    with pytest.raises(ConfigError):
        MultiStateModel(2, (TransitionIntensity(0, 0, 1.0),))
    with pytest.raises(ConfigError):
        MultiStateModel(2, (TransitionIntensity(0, 1, 1.0), TransitionIntensity(0, 1, 2.0)))
    with pytest.raises(ConfigError):
        MultiStateModel(2, (TransitionIntensity(0, 1, 1.0, form="weibull"), TransitionIntensity(1, 0, 1.0)))
    with pytest.raises(ConfigError):
        TransitionIntensity(0, 1, -1.0)


def test_cumulative_intensity_examples():
    m = illness_death((0.6, 0.075, 0.9), form="power")
    assert cumulative_intensity(m, 0, 1, 0.0, 1.0) == pytest.approx(0.6)
    m2 = m.with_hazard_ratios({(0, 1): 0.8})
    assert cumulative_intensity(m2, 0, 1, 0.0, 1.0, group=1) == pytest.approx(0.48)
    m3 = illness_death((0.6, 0.85, 0.9), (1.0, 1.3, 1.0), form="power")
    expected = 0.85 * (2**1.3 - 1) / 1.3
    assert cumulative_intensity(m3, 0, 2, 1.0, 2.0) == pytest.approx(expected, abs=1e-12)
    num, _ = quad(lambda s: 0.85 * s**0.3, 1.0, 2.0, epsabs=1e-13, epsrel=1e-13)
    assert cumulative_intensity(m3, 0, 2, 1.0, 2.0) == pytest.approx(num, abs=1e-10)
    with pytest.raises(ConfigError):
        cumulative_intensity(m, 1, 0, 0.0, 1.0)
    with pytest.raises(ConfigError):
        cumulative_intensity(m, 0, 1, 2.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.01, 3.0),
    st.floats(0.3, 3.0),
    st.floats(0.0, 4.0),
    st.floats(0.0, 4.0),
    st.sampled_from(["power", "weibull"]),
)
def test_cumulative_matches_quadrature(rate, shape, a, b, form):
    s1, s2 = sorted((a, b))
    tr = TransitionIntensity(0, 1, rate, shape, 1.0, form)
    m = MultiStateModel(2, (tr,))
    # s = v**p makes the integrand smooth at the origin for shape < 1
    p = max(1.0, 2.0 / shape)
    num, _ = quad(
        lambda v: float(tr.hazard(v**p)) * p * v ** (p - 1.0) if v > 0 else 0.0,
        s1 ** (1 / p),
        s2 ** (1 / p),
        epsabs=1e-13,
        epsrel=1e-13,
        limit=200,
    )
    assert cumulative_intensity(m, 0, 1, s1, s2) == pytest.approx(num, abs=1e-10)


def test_weibull_form_scales_by_shape():
    p = TransitionIntensity(0, 1, 0.5, 2.0, form="power")
    w = TransitionIntensity(0, 1, 0.5, 2.0, form="weibull")
    assert float(w.hazard(1.5)) == pytest.approx(2.0 * float(p.hazard(1.5)))
    assert float(w.cumulative(0.0, 2.0)) == pytest.approx(0.5 * 4.0)


def test_state_occupation_closed_form():
    m = scenario_model(1)
    assert state_occupation(m, 0, 1.0) == pytest.approx(math.exp(-0.675), abs=1e-10)
    assert state_occupation(m, 0, 1.0) == pytest.approx(0.50916, abs=5e-6)
    np.testing.assert_array_equal(occupation_probabilities(m, 0.0), [1.0, 0.0, 0.0])


@pytest.mark.parametrize("number", [1, 2, 3])
def test_occupation_matches_ode_oracle(number):
    m = scenario_model(number, (0.7, 0.9, 0.8))
    for group in (0, 1):

        def rhs(s, x):
            # generator evaluated away from the origin singularity
            return x @ m.generator(max(s, 1e-300), group)

        sol = solve_ivp(rhs, (1e-9, 4.0), [1.0, 0.0, 0.0], rtol=1e-11, atol=1e-13, method="DOP853")
        np.testing.assert_allclose(occupation_probabilities(m, 4.0, group), sol.y[:, -1], atol=2e-6)


@pytest.mark.parametrize("number", [1, 2, 3])
def test_occupation_normalized_and_monotone(number):
    m = scenario_model(number)
    prev_dead = 0.0
    for s in np.linspace(0.0, 6.0, 13):
        p = occupation_probabilities(m, s)
        assert p.sum() == pytest.approx(1.0, abs=1e-8)
        assert p[2] >= prev_dead - 1e-12
        prev_dead = p[2]


def test_hitting_cdf_exponential():
    m = scenario_model(1)
    # PFS is exponential with rate 0.675 in the homogeneous scenario
    assert hitting_cdf(m, {1, 2}, 2.0) == pytest.approx(1 - math.exp(-1.35), abs=1e-10)


def _fraction_oracle(model, E, t, a):
    """Direct double integral: P(T^E <= t - r) averaged over r ~ U[0, a] (both groups equal)."""

    def cdf(s):
        return 0.5 * (hitting_cdf(model, E, s, 0) + hitting_cdf(model, E, s, 1)) if s > 0 else 0.0

    val, _ = quad(lambda r: cdf(t - r), 0.0, min(a, t), epsabs=1e-10, limit=100)
    return val / a


def test_expected_event_fraction_matches_direct_integral():
    m = scenario_model(3, (0.6, 1.0, 0.85))
    plan = scenario_plan()
    for E in ({1, 2}, {2}):
        assert expected_event_fraction(m, E, 2.5, plan) == pytest.approx(_fraction_oracle(m, E, 2.5, 3.0), abs=1e-7)


@pytest.mark.parametrize("number", [1, 2, 3])
def test_expected_event_fractions_reference(number):
    m = scenario_model(number)
    plan = scenario_plan()
    pfs1, pfs2, os1, os2 = EVENT_FRACTIONS[number]
    got = [
        expected_event_fraction(m, {1, 2}, TIMES[0], plan),
        expected_event_fraction(m, {1, 2}, TIMES[1], plan),
        expected_event_fraction(m, {2}, TIMES[0], plan),
        expected_event_fraction(m, {2}, TIMES[1], plan),
    ]
    np.testing.assert_allclose(got, [pfs1, pfs2, os1, os2], atol=0.002)


def test_expected_event_fraction_zero_time():
    assert expected_event_fraction(scenario_model(1), {1, 2}, 0.0, scenario_plan()) == 0.0


def test_model_json_round_trip():
    m = scenario_model(3, (0.6, 1.0, 0.85))
    again = MultiStateModel.from_dict(json.loads(json.dumps(m.to_dict())))
    assert again == m
    assert again.parametrization == "weibull"


def test_generator_rows_sum_to_zero():
    m = fig2_model()
    q = m.generator(1.3, 1)
    np.testing.assert_allclose(q.sum(axis=1), 0.0, atol=1e-15)


def test_accrual_plan_validation():
    with pytest.raises(ConfigError):
        AccrualPlan(0.0)
    with pytest.raises(ConfigError):
        AccrualPlan(3.0, allocation=1.0)
    np.testing.assert_allclose(AccrualPlan(4.0).recruited_share([-1, 2, 5]), [0.0, 0.5, 1.0])
