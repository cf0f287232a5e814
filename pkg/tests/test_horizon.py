import numpy as np
import pytest

from underflow import validate
from underflow.dp import Grid1D, critical_levels, solve_1rx
from underflow.errors import MaxIterExceeded, PreconditionViolated
from underflow.fixtures import random_two_rx_instance, single_state, two_state
from underflow.horizon import estimate_rho, evaluate_policy, extrapolate, fixed_point_gap, value_iterate


def test_single_state_geometric_closed_form():
    c, d, a = 2.0, 1.0, 0.9
    sol = value_iterate(validate(single_state(c=c, d=d, alpha=a)), tol=1e-11, step=1.0)
    x = sol.V_inf.grids[0].x
    for j in range(5):
        assert sol.V[0, int(x.tolist().index(j * d))] == pytest.approx(
            a ** j * c * d / (1 - a), abs=1e-8)


def test_tail_bound_covers_distance_to_fixed_point():
    v = validate(two_state(alpha=0.9))
    loose = value_iterate(v, tol=1e-8, step=0.5)
    tight = value_iterate(v, tol=1e-13, step=0.5)
    assert loose.residual <= 1e-8
    dist = np.max(np.abs(loose.V - tight.V))
    assert dist <= loose.tail_bound() + 1e-12


def test_iterates_nondecreasing_and_bounded():
    v = validate(two_state(alpha=0.9, h=0.2))
    sol = value_iterate(v, tol=1e-10, step=0.5)
    res = [r for _, r, _ in sol.trace]
    assert all(r2 <= 0.9 * r1 + 1e-12 for r1, r2 in zip(res[5:], res[6:]))
    x = sol.V_inf.grids[0].x
    bound = (2.0 * 1.0 + 0.2 * x) / (1 - 0.9)
    assert np.all(sol.V <= bound[None, :] + 1e-9)


def test_max_iter_carries_partial():
    v = validate(two_state(alpha=0.9))
    with pytest.raises(MaxIterExceeded) as exc:
        value_iterate(v, tol=1e-12, max_iter=5, step=0.5)
    part = exc.value.partial
    assert part.iterations == 5 and part.residual > 1e-12


def test_alpha_one_rejected():
    with pytest.raises(PreconditionViolated):
        value_iterate(validate(two_state()), step=0.5)


def test_limit_targets_dominate_finite_ones():
    v = validate(two_state(alpha=0.9))
    sol = value_iterate(v, tol=1e-10, step=0.5)
    assert sol.b_stable_at is not None
    grid = sol.V_inf.grids[0]
    for N in (5, 10, 20):
        vg = solve_1rx(validate(two_state(N=N, alpha=0.9)), grid)
        assert np.all(sol.b_inf >= critical_levels(vg, N) - 1e-12)


def test_greedy_policy_is_fixed_point():
    sol = value_iterate(validate(two_state(alpha=0.9, h=0.1)), tol=1e-10, step=0.5)
    assert fixed_point_gap(sol) <= 1e-7
    J = evaluate_policy(sol)
    assert J.shape == sol.V.shape


def test_two_receiver_value_iteration():
    v = validate(random_two_rx_instance(np.random.default_rng(4), N=3).replace(alpha=0.7))
    sol = value_iterate(v, slots=4, step=0.5, tol=1e-9)
    assert sol.residual < 1e-9
    assert sol.b_inf.shape == (v.n_states(0), v.n_states(1), 2)
    assert fixed_point_gap(sol) <= max(1e-7, 2 * sol.tail_bound())


def test_extrapolation_exact_on_lines():
    alphas = (0.9, 0.95, 0.99)
    star, resid = extrapolate(alphas, [3.0 - 2.0 * (1 - a) for a in alphas])
    assert star == pytest.approx(3.0) and resid == pytest.approx(0.0, abs=1e-12)


def test_single_state_average_cost_is_c_d():
    est = estimate_rho(validate(single_state(c=2.0, d=1.0, h=3.0)), step=1.0)
    assert est.rho_star == pytest.approx(2.0, abs=1e-6)
    for a in est.alphas:
        assert est.rho_points[a] == pytest.approx(a * 2.0, abs=1e-7)
    assert est.to_csv().splitlines()[0] == "alpha,m,rho_point,iterations"


def test_rho_points_settle_and_workers_agree():
    v = validate(two_state(alpha=0.9, h=0.5))
    a = estimate_rho(v, step=0.5, slots=40, alphas=(0.9, 0.95, 0.99))
    b = estimate_rho(v, step=0.5, slots=40, alphas=(0.9, 0.95, 0.99), workers=2)
    assert a.rho_star == b.rho_star
    gaps = a.gaps()
    assert gaps[-1] < gaps[0]
    assert a.rho_star >= 0


def test_bad_alpha_ladder():
    with pytest.raises(ValueError):
        estimate_rho(validate(single_state()), alphas=(0.99, 0.9))


def test_trace_csv():
    sol = value_iterate(validate(two_state(alpha=0.5)), step=0.5)
    lines = sol.trace_csv().splitlines()
    assert lines[0] == "iter,residual,b" and len(lines) == sol.iterations + 1
