import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from underflow import (BarrierHolding, ChannelModel, EffectiveCurve, LinearHolding,
                       PowerRateCurve, ProblemSpec, Receiver, TabulatedHolding, load_spec,
                       power_of, rate_of, save_spec, single_receiver, validate)
from underflow.errors import (BadStochasticMatrix, InfeasiblePower, NonConvexCurve,
                              OutOfRange, SpecError)
from underflow.fixtures import BUNDLED, bundled, example2, three_state_iid, two_state


def test_effective_curve_drops_unreachable_segments():
    cv = EffectiveCurve.build(PowerRateCurve((1.0, 2.0, 4.0), (1.0, 2.0)), P=2.0)
    # 1 packet costs 1, the second segment reaches power 3 > 2 before its end
    assert cv.K == 1
    assert cv.z_max == pytest.approx(1.5)
    assert list(cv.segment_ends()) == [1.0, 1.5]


def test_power_and_rate_by_hand():
    cv = EffectiveCurve.build(PowerRateCurve((1.0, 3.0), (2.0,)), P=8.0)
    assert power_of(cv, 1.0) == 1.0
    assert power_of(cv, 3.0) == 2.0 + 3.0
    assert rate_of(cv, 5.0) == pytest.approx(3.0)
    assert cv.z_max == pytest.approx(4.0)
    with pytest.raises(OutOfRange):
        power_of(cv, 4.5)
    with pytest.raises(OutOfRange):
        rate_of(cv, 9.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.1, 5.0), min_size=1, max_size=4),
       st.floats(0.5, 20.0), st.floats(0.0, 1.0))
def test_rate_inverts_power(raw, P, frac):
    slopes = np.sort(raw)
    bps = np.arange(1, len(slopes)) * 0.7
    cv = EffectiveCurve.build(PowerRateCurve(tuple(slopes), tuple(bps)), P)
    z = frac * cv.z_max
    assert rate_of(cv, power_of(cv, z)) == pytest.approx(z, abs=1e-9)
    assert power_of(cv, cv.z_max) == pytest.approx(P)


def test_curve_validation():
    with pytest.raises(NonConvexCurve):
        PowerRateCurve((2.0, 1.0), (1.0,)).check()
    with pytest.raises(NonConvexCurve):
        PowerRateCurve((1.0, 2.0), ()).check()
    with pytest.raises(NonConvexCurve):
        PowerRateCurve((0.0,)).check()


def test_bad_transition_matrix_is_named():
    ch = ChannelModel.iid([1.0, 2.0], [0.6, 0.6])
    spec = ProblemSpec((Receiver(ch, 1.0),), 4.0, 1.0, 2)
    with pytest.raises(BadStochasticMatrix):
        validate(spec)


def test_infeasible_power():
    with pytest.raises(InfeasiblePower):
        validate(single_receiver([3.0], [1.0], 1.0, 2.0))
    # each receiver alone fits but not both in their worst states
    v = example2()
    with pytest.raises(InfeasiblePower):
        validate(v.replace(peak_power=4.0))


def test_discounted_needs_alpha_below_one():
    with pytest.raises(SpecError):
        validate(single_receiver([1.0], [1.0], 1.0, 2.0, alpha=1.0, horizon="discounted"))


def test_holding_costs():
    assert LinearHolding(0.5)(4.0) == 2.0
    b = BarrierHolding(2.0, 3.0)
    assert float(b(1.0)) == 0.0 and float(b(3.0)) == 3.0
    t = TabulatedHolding(((0, 0), (1, 1), (2, 3)))
    assert float(t(1.5)) == 2.0 and float(t(3.0)) == 5.0
    assert t.linear_rate is None and LinearHolding(0.2).linear_rate == 0.2
    with pytest.raises(SpecError):
        TabulatedHolding(((0, 0), (1, 2), (2, 3)))      # concave


def test_iid_detection_and_stationary():
    v = validate(two_state())
    assert v.iid == (True,)
    T = [[0.9, 0.1], [0.3, 0.7]]
    m = validate(single_receiver([1.0, 2.0], None, 1.0, 2.0, transition=T))
    assert m.iid == (False,)
    np.testing.assert_allclose(m.probs[0], [0.75, 0.25])


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_specs_load_and_validate(name):
    validate(bundled(name))


@pytest.mark.parametrize("spec", [two_state(), example2(), three_state_iid(),
                                  single_receiver([PowerRateCurve((1.0, 2.5), (0.5,))],
                                                  [1.0], 0.5, 3.0, h=0.1)])
def test_json_round_trip_is_bit_exact(spec, tmp_path):
    p = tmp_path / "s.json"
    save_spec(spec, p)
    back = load_spec(p)
    assert back.dumps() == spec.dumps()
    assert back.spec_hash() == spec.spec_hash()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.1, 10.0, allow_subnormal=False), min_size=1, max_size=4),
       st.floats(0.0, 1.0), st.floats(0.01, 3.0))
def test_round_trip_random_floats(costs, alpha, h):
    costs = sorted(costs)
    spec = single_receiver(costs, np.ones(len(costs)) / len(costs), 1.0,
                           2 * costs[-1], alpha=alpha, horizon=3, h=h)
    back = ProblemSpec.loads(spec.dumps())
    assert back.dumps() == spec.dumps()
    assert back.receivers[0].holding.h == h
    assert back.alpha == alpha


def test_malformed_json_is_spec_error():
    with pytest.raises(SpecError):
        ProblemSpec.loads("{not json")
    with pytest.raises(SpecError):
        ProblemSpec.loads(json.dumps({"receivers": []}))
