import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from underflow import ChannelModel, LinearHolding, PowerRateCurve, ProblemSpec, Receiver, validate
from underflow.dp import (Grid1D, ValueGrid, check_convexity, check_supermodularity,
                          critical_levels, default_grids_2rx, interp2, lower_convex_envelope,
                          solve_1rx, solve_2rx)
from underflow.errors import GridMisaligned, MemoryBudgetExceeded, PreconditionViolated
from underflow.fixtures import example2, random_two_rx_instance, single_state, two_state


def test_single_state_value_is_just_in_time():
    c, d, N = 2.0, 1.0, 5
    v = validate(single_state(c=c, d=d, alpha=1.0, horizon=N))
    vg = solve_1rx(v, Grid1D.for_demand(d, N, 0.5))
    for n in range(N + 1):
        for j in range(n + 1):
            assert vg.value(n, j * d, 0) == pytest.approx((n - j) * c * d, abs=1e-12)


def test_two_state_by_hand():
    # c = 1 (z_max 2) or 2 (z_max 1), equal odds, d = 1
    v = validate(two_state(N=2))
    vg = solve_1rx(v, Grid1D.for_demand(1.0, 2, 0.5))
    assert vg.V[1, 0, 0] == 1.0 and vg.V[1, 1, 0] == 2.0
    # good state: send 2 now for 2 rather than 1 + E V_1(0) = 2.5
    assert vg.V[2, 0, 0] == pytest.approx(2.0)
    assert vg.y[2, 0, 0] == pytest.approx(2.0)
    # bad state: send 1 for 2, then 1.5 expected
    assert vg.V[2, 1, 0] == pytest.approx(3.5)
    np.testing.assert_allclose(critical_levels(vg, 2), [[2.0], [1.0]])


def test_misaligned_grid_rejected():
    v = validate(two_state(N=2))
    with pytest.raises(GridMisaligned):
        solve_1rx(v, Grid1D(0.3, 3.0))


def test_memory_cap():
    v = validate(two_state(N=3))
    with pytest.raises(MemoryBudgetExceeded):
        solve_1rx(v, Grid1D.for_demand(1.0, 3, 0.01), memory_cap=1000)
    ve = validate(example2())
    with pytest.raises(MemoryBudgetExceeded):
        solve_2rx(ve, default_grids_2rx(ve, 0.001))


def test_two_rx_needs_linear_curves():
    pw = PowerRateCurve((1.0, 2.0), (1.0,))
    ch = ChannelModel.iid([pw], [1.0])
    spec = ProblemSpec((Receiver(ch, 1.0), Receiver(ch, 1.0)), 10.0, 1.0, 2)
    with pytest.raises(PreconditionViolated):
        solve_2rx(validate(spec))


def decoupled(N=3, seed=0):
    """Two receivers whose joint budget never binds."""
    rng = np.random.default_rng(seed)
    rcvs = []
    for _ in range(2):
        costs = np.sort(rng.uniform(1.0, 2.0, 2))
        ch = ChannelModel.iid([PowerRateCurve.linear(float(c)) for c in costs], [0.5, 0.5])
        rcvs.append(Receiver(ch, 1.0, LinearHolding(float(rng.uniform(0, 0.2)))))
    P = 2 * 2.0 * N * 1.0
    return ProblemSpec(tuple(rcvs), P, 0.95, N)


def test_two_rx_decoupled_equals_sum_of_single():
    spec = decoupled()
    v = validate(spec)
    vg2 = solve_2rx(v, default_grids_2rx(v, 0.25))
    singles = []
    for m in range(2):
        sub = validate(spec.replace(receivers=(spec.receivers[m],)))
        singles.append(solve_1rx(sub, vg2.grids[m]))
    for n in range(1, 4):
        tot = singles[0].V[n][:, None, :, None] + singles[1].V[n][None, :, None, :]
        np.testing.assert_allclose(vg2.V[n], tot, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-5, 5),
       st.floats(0, 2.0), st.floats(0, 2.0))
def test_interp2_exact_on_affine(a, b, c, x1, x2):
    grids = (Grid1D(0.25, 2.0), Grid1D(0.5, 2.0))
    X1, X2 = np.meshgrid(grids[0].x, grids[1].x, indexing="ij")
    T = a * X1 + b * X2 + c
    assert float(interp2(T, grids, np.array([x1, x2]))) == pytest.approx(
        a * x1 + b * x2 + c, abs=1e-9)


def test_interp2_uses_anti_diagonal_split():
    grids = (Grid1D(1.0, 1.0), Grid1D(1.0, 1.0))
    T = np.array([[0.0, 0.0], [0.0, 1.0]])          # only the (1, 1) corner raised
    assert float(interp2(T, grids, np.array([0.5, 0.5]))) == 0.0
    assert float(interp2(T, grids, np.array([0.75, 0.75]))) == pytest.approx(0.5)


def test_lower_convex_envelope():
    rng = np.random.default_rng(3)
    V = rng.normal(size=(6, 7))
    E = lower_convex_envelope(V)
    assert np.all(E <= V + 1e-12)
    vg = _wrap2(E)
    assert check_convexity(vg, eps=1e-9).ok
    # convex data is left alone
    X1, X2 = np.meshgrid(np.arange(6.0), np.arange(7.0), indexing="ij")
    C = X1 ** 2 + X1 * X2 + X2 ** 2
    np.testing.assert_allclose(lower_convex_envelope(C), C, atol=1e-9)


def _wrap2(A):
    g = (Grid1D(1.0, A.shape[0] - 1.0), Grid1D(1.0, A.shape[1] - 1.0))
    V = np.zeros((2, 1, 1) + A.shape)
    V[1, 0, 0] = A
    return ValueGrid(validate(example2()), g, V, None, V.copy(), (0, 1))


def test_checks_flag_bad_tables():
    X1, X2 = np.meshgrid(np.arange(5.0), np.arange(5.0), indexing="ij")
    assert not check_convexity(_wrap2(-(X1 ** 2))).ok
    assert not check_supermodularity(_wrap2(-X1 * X2)).ok
    assert check_supermodularity(_wrap2(X1 * X2)).ok


def test_random_two_rx_structure():
    rng = np.random.default_rng(7)
    for _ in range(3):
        v = validate(random_two_rx_instance(rng, N=3))
        vg = solve_2rx(v, default_grids_2rx(v, 0.25), convexify=False)
        # without the envelope the structure already holds on these instances
        for tables in ("V", "g"):
            assert check_convexity(vg, eps=1e-9, tables=tables).ok
            assert check_supermodularity(vg, eps=1e-9, tables=tables).ok


def test_raw_example2_violations_shrink_with_step():
    """Grid-induced convexity defects of the raw 2-D DP are O(step)."""
    v = validate(example2())
    worst = {}
    for step in (0.05, 0.025):
        vg = solve_2rx(v, default_grids_2rx(v, step), convexify=False)
        worst[step] = check_convexity(vg, eps=1e-9).worst
    assert worst[0.05] < 0 and worst[0.025] < 0
    assert abs(worst[0.025]) < 0.7 * abs(worst[0.05])
    vg = solve_2rx(v, default_grids_2rx(v, 0.05))
    assert check_convexity(vg, eps=1e-9).ok


def test_value_grid_save_load(tmp_path):
    v = validate(two_state(N=3))
    vg = solve_1rx(v, Grid1D.for_demand(1.0, 3, 0.5))
    p = vg.save(tmp_path)
    back = ValueGrid.load(tmp_path, vg)
    assert p.exists()
    np.testing.assert_array_equal(back.V, vg.V)
    assert "n,s,x,V,z" in vg.to_csv().splitlines()[0]
