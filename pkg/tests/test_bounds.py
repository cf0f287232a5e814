import numpy as np
import pytest

from underflow import validate
from underflow import bounds as B
from underflow.dp import Grid1D, default_grids_2rx, solve_1rx, solve_2rx
from underflow.errors import DualSearchDiverged, PreconditionViolated
from underflow.fixtures import example2, random_two_rx_instance, three_state_iid, two_state
from underflow.sim import check_action, exhaustive_expectation


def test_one_receiver_bound_is_exact():
    v = validate(three_state_iid(N=4))
    rep = B.separable_bound(v, exact=True)
    assert rep.kind == "separable-threshold"
    for s, val in rep.values.items():
        assert val == pytest.approx(rep.exact[s], abs=1e-9)
    dp = B.separable_bound(v, use_threshold=False)
    assert dp.value == pytest.approx(rep.value, abs=1e-9)


def test_decoupled_power_makes_bound_exact():
    sp = random_two_rx_instance(np.random.default_rng(7)).replace(peak_power=30.0)
    v = validate(sp)
    sep = B.separable_bound(v, step=0.25, exact=True)
    lag = B.lagrangian_bound(v, step=0.25)
    assert lag.lam == 0.0
    for s in sep.values:
        assert sep.values[s] == pytest.approx(sep.exact[s], abs=1e-9)


def test_lambda_zero_is_separable_and_dual_dominates():
    v = validate(random_two_rx_instance(np.random.default_rng(3)))
    sep = B.separable_bound(v, step=0.25, use_threshold=False)
    l0 = B.lagrangian_value(v, 0.0, step=0.25)
    assert l0.value == pytest.approx(sep.value, abs=1e-12)
    lag = B.lagrangian_bound(v, step=0.25)
    assert lag.value >= sep.value - 1e-12
    assert B.dual_is_concave(lag.trace)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bounds_below_exact(seed):
    v = validate(random_two_rx_instance(np.random.default_rng(seed)))
    lag = B.lagrangian_bound(v, step=0.25, exact=True)
    for s, val in lag.values.items():
        assert val <= lag.exact[s] + 1e-9
    assert lag.gap >= -1e-9


def test_example2_bound(example2_vg):
    v = example2_vg.vspec
    rep = B.attach_exact(B.lagrangian_bound(v, step=0.02), vg=example2_vg)
    assert all(rep.values[s] <= rep.exact[s] + 1e-9 for s in rep.values)


def test_diverging_dual_is_reported(monkeypatch):
    v = validate(random_two_rx_instance(np.random.default_rng(1)))

    class Fake:
        def __init__(self, lam):
            self.value = lam

    monkeypatch.setattr(B, "lagrangian_value", lambda vs, lam, x, step: Fake(lam))
    with pytest.raises(DualSearchDiverged):
        B.lagrangian_bound(v, lam_max=1.0)


def test_bounds_need_finite_horizon():
    with pytest.raises(PreconditionViolated):
        B.separable_bound(validate(two_state(N=3).replace(horizon="discounted", alpha=0.9)))


def test_greedy_one_receiver_recovers_optimum():
    v = validate(two_state(N=4, h=0.2))
    rep = B.separable_bound(v)
    pol = B.greedy_feasible(v, rep)
    vg = solve_1rx(v, Grid1D.for_demand(1.0, 4, 0.1))
    for s in range(2):
        got = exhaustive_expectation(pol, v, 4, [0.0], [s])
        assert got == pytest.approx(vg.value(4, 0.0, s), rel=1e-9)


def test_greedy_two_receivers_feasible_and_above_exact():
    v = validate(random_two_rx_instance(np.random.default_rng(5)))
    rep = B.lagrangian_bound(v, step=0.25, exact=True)
    pol = B.greedy_feasible(v, rep)
    x = np.zeros((1, 2))
    for s in B._joint_states(v):
        sa = np.array([s])
        z = pol.act(v.N, x, sa)
        ok, _ = check_action(v, x, z, sa)
        assert ok.all()
        cost = exhaustive_expectation(pol, v, v.N, x[0], np.array(s))
        assert cost >= rep.exact[s] - 1e-6
        assert cost <= 1.05 * rep.exact[s]


def test_bound_csv():
    v = validate(random_two_rx_instance(np.random.default_rng(2)))
    text = B.lagrangian_bound(v, step=0.25, exact=True).to_csv()
    head, *rows = text.splitlines()
    assert head == "kind,lambda,state,value,per_receiver,exact,gap"
    assert any(r.startswith("trace,") for r in rows)
