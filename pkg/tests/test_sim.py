import numpy as np
import pytest

from underflow import validate
from underflow.dp import Grid1D, solve_1rx
from underflow.errors import PolicyInfeasibleAction
from underflow.fixtures import random_two_rx_instance, single_state, three_state_iid, two_state
from underflow.sim import (DPGreedy1, DPGreedy2, JustInTime, OpportunisticGreedy,
                           exhaustive_expectation, policy_value, sample_paths, simulate)
from underflow.threshold import BaseStockPolicy


def test_just_in_time_single_state():
    v = validate(single_state(c=2.0, d=1.0, alpha=1.0, horizon=5))
    st = simulate(JustInTime(v), v, episodes=20, slots=5)
    assert st.mean == pytest.approx(10.0) and st.stderr == 0.0 and st.aborted == 0


def test_exhaustive_matches_dp():
    v = validate(two_state(N=5, h=0.3))
    vg = solve_1rx(v, Grid1D.for_demand(1.0, 5, 0.1))
    pol = DPGreedy1.from_valuegrid(vg)
    for s in range(2):
        assert exhaustive_expectation(pol, v, 5, [0.0], [s]) == pytest.approx(
            vg.value(5, 0.0, s), rel=1e-12)
        assert policy_value(pol, v, 5, [0.0], [s]) == pytest.approx(
            vg.value(5, 0.0, s), rel=1e-12)


def test_monte_carlo_within_three_stderr():
    v = validate(three_state_iid(N=6))
    vg = solve_1rx(v, Grid1D.for_demand(1.0, 6, 0.1))
    pol = DPGreedy1.from_valuegrid(vg)
    exact = sum(v.probs[0][s] * vg.value(6, 0.0, s) for s in range(3))
    st = simulate(pol, v, episodes=4000, slots=6, seed=11)
    assert abs(st.mean - exact) <= 3 * st.stderr


def test_paths_follow_the_chain():
    v = validate(two_state(N=3))
    S = sample_paths(v, 20000, 2, seed=1)
    assert abs(np.mean(S[:, :, 0] == 0) - 0.5) < 0.02


def test_same_seed_same_bytes():
    v = validate(three_state_iid(N=6))
    pol = OpportunisticGreedy(v)
    a = simulate(pol, v, 50, 6, seed=3, record=3)
    b = simulate(pol, v, 50, 6, seed=3, record=3)
    assert a.to_csv() == b.to_csv()
    assert all(x.to_csv() == y.to_csv() for x, y in zip(a.trajectories, b.trajectories))
    c = simulate(pol, v, 50, 6, seed=4)
    assert c.mean != a.mean


def test_episode_streams_independent_of_batch():
    v = validate(three_state_iid(N=6))
    big = sample_paths(v, 10, 6, seed=5)
    tail = sample_paths(v, 4, 6, seed=5, first_episode=6)
    assert np.array_equal(big[6:], tail)


class Lazy:
    M = 1

    def act(self, n, x, s):
        return np.zeros_like(x)


class Greedy:
    M = 1

    def act(self, n, x, s):
        return np.full_like(x, 100.0)


def test_underflow_and_power_violations():
    v = validate(two_state(N=3))
    st = simulate(Lazy(), v, 10, 3)
    assert st.aborted == 10 and st.underflow_violations == 10 and st.episodes == 0
    st = simulate(Greedy(), v, 10, 3)
    assert st.power_violations == 10
    with pytest.raises(PolicyInfeasibleAction):
        simulate(Lazy(), v, 10, 3, strict=True)
    with pytest.raises(PolicyInfeasibleAction):
        exhaustive_expectation(Lazy(), v, 3, [0.0], [0])


def test_dp_greedy_beats_just_in_time():
    v = validate(three_state_iid(N=6))
    vg = solve_1rx(v, Grid1D.for_demand(1.0, 6, 0.1))
    dp = simulate(DPGreedy1.from_valuegrid(vg), v, 10_000, 6, seed=2)
    jit = simulate(JustInTime(v), v, 10_000, 6, seed=2)
    diff = jit.costs - dp.costs
    assert diff.mean() - 1.96 * diff.std(ddof=1) / np.sqrt(diff.size) > 0


def test_threshold_and_dp_greedy_act_alike():
    v = validate(three_state_iid(N=6))
    vg = solve_1rx(v, Grid1D.for_demand(1.0, 6, 1.0))
    a = simulate(BaseStockPolicy.from_spec(v), v, 200, 6, seed=9, record=200)
    b = simulate(DPGreedy1.from_valuegrid(vg), v, 200, 6, seed=9, record=200)
    for ta, tb in zip(a.trajectories, b.trajectories):
        for ra, rb in zip(ta.records, tb.records):
            assert ra["z"][0] == pytest.approx(rb["z"][0], abs=1e-9)
    assert np.allclose(a.costs, b.costs, rtol=1e-12)


def test_two_receiver_dp_greedy_matches_table():
    v = validate(random_two_rx_instance(np.random.default_rng(0)))
    from underflow.dp import default_grids_2rx, solve_2rx

    vg = solve_2rx(v, default_grids_2rx(v, 0.25))
    pol = DPGreedy2(vg)
    for s in [(0, 0), (v.n_states(0) - 1, v.n_states(1) - 1)]:
        got = policy_value(pol, v, v.N, [0.0, 0.0], s)
        assert got == pytest.approx(float(vg.value(v.N, np.zeros(2), s)), rel=1e-6)


def test_stats_csv():
    v = validate(two_state(N=3))
    text = simulate(JustInTime(v), v, 5, 3).to_csv()
    assert text.splitlines()[0].startswith("episodes,mean,stderr")
